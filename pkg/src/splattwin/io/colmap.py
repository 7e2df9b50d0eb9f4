"""Reader/writer for COLMAP sparse models in text format.

Only undistorted pinhole models are accepted; anything carrying distortion
is rejected rather than silently approximated.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import DanglingReferenceError, ParseError, UnsupportedFormatError
from ..gaussians import Camera, quat_to_rotmat

CAMERA_PARAMS = {"PINHOLE": 4, "SIMPLE_PINHOLE": 3}


@dataclass
class Intrinsics:
    model: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float


@dataclass
class ImagePose:
    id: int
    name: str
    camera_id: int
    qvec: np.ndarray  # (qw, qx, qy, qz), world-to-camera
    tvec: np.ndarray


@dataclass
class SparseModel:
    cameras: dict = field(default_factory=dict)
    images: list = field(default_factory=list)
    point_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.uint8))

    def camera(self, image: ImagePose | str) -> Camera:
        if isinstance(image, str):
            image = self.image(image)
        intr = self.cameras[image.camera_id]
        return Camera(intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height,
                      quat_to_rotmat(image.qvec), image.tvec, image.name)

    def image(self, name: str) -> ImagePose:
        for im in self.images:
            if im.name == name or os.path.splitext(im.name)[0] == name or str(im.id) == name:
                return im
        raise KeyError(name)

    def all_cameras(self) -> list[Camera]:
        return [self.camera(im) for im in self.images]

    @property
    def point_colors(self) -> np.ndarray:
        return self.colors.astype(np.float64) / 255.0


def _data_lines(text: str):
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line and not line.startswith("#"):
            yield no, line


def _num(tok: str, kind, path, no, what):
    try:
        v = kind(tok)
    except ValueError:
        raise ParseError(f"cannot read {what} from {tok!r}", path, no) from None
    if kind is float and not math.isfinite(v):
        raise ParseError(f"non-finite {what}", path, no)
    return v


def parse_cameras_text(text: str, path: str = "cameras.txt") -> dict:
    cameras = {}
    for no, line in _data_lines(text):
        tok = line.split()
        if len(tok) < 4:
            raise ParseError("camera line needs id, model, width and height", path, no)
        cid = _num(tok[0], int, path, no, "camera id")
        model = tok[1]
        if model not in CAMERA_PARAMS:
            raise UnsupportedFormatError(
                f"{path}:{no}: unsupported camera model {model} (supported: PINHOLE, SIMPLE_PINHOLE)")
        width = _num(tok[2], int, path, no, "width")
        height = _num(tok[3], int, path, no, "height")
        params = [_num(t, float, path, no, "camera parameter") for t in tok[4:]]
        if len(params) != CAMERA_PARAMS[model]:
            raise ParseError(f"{model} expects {CAMERA_PARAMS[model]} parameters, "
                             f"got {len(params)}", path, no)
        if model == "PINHOLE":
            fx, fy, cx, cy = params
        else:
            fx, cx, cy = params
            fy = fx
        if width < 1 or height < 1 or fx <= 0 or fy <= 0:
            raise ParseError("image size and focal length must be positive", path, no)
        if not (0 <= cx < width and 0 <= cy < height):
            raise ParseError("principal point lies outside the image", path, no)
        if cid in cameras:
            raise ParseError(f"duplicate camera id {cid}", path, no)
        cameras[cid] = Intrinsics(model, width, height, fx, fy, cx, cy)
    return cameras


def parse_images_text(text: str, path: str = "images.txt") -> list:
    images = []
    seen = set()
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        no = i + 1
        line = lines[i].strip()
        i += 1
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) < 10:
            raise ParseError("image line needs id, qw qx qy qz, tx ty tz, camera id, name",
                             path, no)
        iid = _num(tok[0], int, path, no, "image id")
        q = np.array([_num(t, float, path, no, "quaternion") for t in tok[1:5]])
        t = np.array([_num(v, float, path, no, "translation") for v in tok[5:8]])
        cid = _num(tok[8], int, path, no, "camera id")
        name = " ".join(tok[9:])
        norm = np.linalg.norm(q)
        if not norm > 1e-12 or not np.isfinite(norm):
            raise ParseError("zero quaternion", path, no)
        if iid in seen:
            raise ParseError(f"duplicate image id {iid}", path, no)
        seen.add(iid)
        if abs(norm - 1.0) > 1e-12:
            # already-unit input is kept as written so write/parse cycles are bit-exact
            q = q / norm
        images.append((no, ImagePose(iid, name, cid, q, t)))
        i += 1  # the following line lists 2D observations, unused here
    return images


def parse_points_text(text: str, path: str = "points3D.txt"):
    ids, xyz, rgb = [], [], []
    for no, line in _data_lines(text):
        tok = line.split()
        if len(tok) < 8 or (len(tok) - 8) % 2:
            raise ParseError("point line needs id, xyz, rgb, error and (image, point2d) pairs",
                             path, no)
        ids.append(_num(tok[0], int, path, no, "point id"))
        xyz.append([_num(v, float, path, no, "coordinate") for v in tok[1:4]])
        c = [_num(v, int, path, no, "colour") for v in tok[4:7]]
        if any(v < 0 or v > 255 for v in c):
            raise ParseError("colour outside 0..255", path, no)
        rgb.append(c)
        _num(tok[7], float, path, no, "reprojection error")
    return (np.asarray(ids, np.int64), np.asarray(xyz, np.float64).reshape(-1, 3),
            np.asarray(rgb, np.uint8).reshape(-1, 3))


def parse_colmap_texts(cameras_txt: str, images_txt: str, points_txt: str,
                       root: str = "") -> SparseModel:
    cpath = os.path.join(root, "cameras.txt")
    ipath = os.path.join(root, "images.txt")
    cameras = parse_cameras_text(cameras_txt, cpath)
    images = parse_images_text(images_txt, ipath)
    for no, im in images:
        if im.camera_id not in cameras:
            raise DanglingReferenceError(f"image {im.name} references unknown camera "
                                         f"{im.camera_id}", ipath, no)
    ids, pts, cols = parse_points_text(points_txt, os.path.join(root, "points3D.txt"))
    return SparseModel(cameras, [im for _, im in images], ids, pts, cols)


def parse_colmap_text(directory) -> SparseModel:
    """Read ``cameras.txt``, ``images.txt`` and ``points3D.txt`` from a directory."""
    directory = os.fspath(directory)
    texts = []
    for name in ("cameras.txt", "images.txt", "points3D.txt"):
        path = os.path.join(directory, name)
        try:
            with open(path, encoding="utf-8") as fh:
                texts.append(fh.read())
        except FileNotFoundError:
            raise ParseError("file not found", path) from None
        except UnicodeDecodeError:
            raise ParseError("not a text file", path) from None
    return parse_colmap_texts(*texts, root=directory)


def format_colmap_texts(model: SparseModel) -> tuple[str, str, str]:
    cams = ["# Camera list with one line of data per camera:",
            "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]"]
    for cid, c in sorted(model.cameras.items()):
        params = ([c.fx, c.fy, c.cx, c.cy] if c.model == "PINHOLE" else [c.fx, c.cx, c.cy])
        cams.append(" ".join([str(cid), c.model, str(c.width), str(c.height)]
                             + [repr(float(p)) for p in params]))
    ims = ["# Image list with two lines of data per image:",
           "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
           "#   POINTS2D[] as (X, Y, POINT3D_ID)"]
    for im in model.images:
        vals = [repr(float(v)) for v in (*im.qvec, *im.tvec)]
        ims.append(" ".join([str(im.id), *vals, str(im.camera_id), im.name]))
        ims.append("")
    pts = ["# 3D point list with one line of data per point:",
           "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)"]
    for pid, p, c in zip(model.point_ids, model.points, model.colors):
        pts.append(" ".join([str(int(pid)), *(repr(float(v)) for v in p),
                             *(str(int(v)) for v in c), "0.0"]))
    return ("\n".join(cams) + "\n", "\n".join(ims) + "\n", "\n".join(pts) + "\n")


def write_colmap_text(model: SparseModel, directory) -> None:
    directory = os.fspath(directory)
    os.makedirs(directory, exist_ok=True)
    for name, text in zip(("cameras.txt", "images.txt", "points3D.txt"),
                          format_colmap_texts(model)):
        with open(os.path.join(directory, name), "w", encoding="utf-8") as fh:
            fh.write(text)
