"""Command-line entry point: ``splattwin <subcommand> ...``.

Heavy modules are imported only after the arguments are parsed so that
``--threads`` can size the numba thread pool before numba starts.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile

log = logging.getLogger("splattwin")

ENV_PREFIX = "SPLATTWIN_"
MANIFEST_NAME = "splattwin_manifest.json"
EXIT_CODES = {"usage": 2, "input": 3, "config": 4, "format": 5, "parse": 5, "unsupported": 5,
              "reference": 5, "domain": 6, "consistency": 7, "io": 8, "error": 1}
# options that never influence results, left out of the rerun check
SHARED_FLAGS = {"seed"}  # config fields already covered by a global flag
VOLATILE = {"force", "threads", "log_level", "command", "func"}


# ---------------------------------------------------------------- config plumbing

def _train_fields():
    from .losses import LossConfig
    from .optimizer import TrainConfig
    out = [(f, None) for f in dataclasses.fields(TrainConfig) if f.name != "loss"]
    out += [(f, "loss") for f in dataclasses.fields(LossConfig)]
    return out


def _kind(f):
    """Value parser for a config field, from its default or annotation."""
    default = f.default if f.default is not dataclasses.MISSING else None
    ann = str(f.type)
    if isinstance(default, bool) or ann == "bool":
        return "bool"
    if isinstance(default, tuple) or ann.startswith("tuple"):
        return "rgb"
    if isinstance(default, int) or ann.startswith("int"):
        return "int"
    return "float"


def _parse_value(kind, text):
    if isinstance(text, str) and text.strip().lower() in ("none", "null", "off") and kind != "bool":
        return None
    if kind == "bool":
        if isinstance(text, bool):
            return text
        v = str(text).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind == "rgb":
        parts = text.replace(",", " ").split() if isinstance(text, str) else list(text)
        if len(parts) != 3:
            raise ValueError(f"expected 3 values, got {text!r}")
        return tuple(float(p) for p in parts)
    return int(text) if kind == "int" else float(text)


def _flag(name):
    return "--" + name.replace("_", "-")


def add_config_flags(parser):
    grp = parser.add_argument_group("training configuration (override --config)")
    for f, _ in _train_fields():
        if f.name in SHARED_FLAGS:
            continue
        kind = _kind(f)
        dest = "cfg_" + f.name
        if kind == "bool":
            grp.add_argument(_flag(f.name), dest=dest, action=argparse.BooleanOptionalAction,
                             default=None)
        elif kind == "rgb":
            grp.add_argument(_flag(f.name), dest=dest, nargs=3, type=float, default=None,
                             metavar=("R", "G", "B"))
        else:
            grp.add_argument(_flag(f.name), dest=dest, default=None,
                             type=lambda t, k=kind: _parse_value(k, t))
    grp.add_argument("--config", help="TrainConfig JSON file")


def resolve_config(args, env=None, defaults=None):
    """TrainConfig from defaults < config file < environment < flags.

    ``defaults`` replaces the dataclass defaults for stage-specific values.
    """
    from .errors import ConfigError
    from .optimizer import TrainConfig
    env = os.environ if env is None else env
    data = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
    data = {**(defaults or {}), **data}
    loss = dict(data.pop("loss", {}) or {})
    for f, group in _train_fields():
        target = loss if group else data
        key = ENV_PREFIX + f.name.upper()
        if key in env:
            try:
                target[f.name] = _parse_value(_kind(f), env[key])
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        flag = getattr(args, "cfg_" + f.name, None)
        if flag is not None:
            target[f.name] = tuple(flag) if _kind(f) == "rgb" else flag
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    data["loss"] = loss
    return TrainConfig.from_dict(data)


# ---------------------------------------------------------------- manifest

def sha256_path(path) -> str:
    h = hashlib.sha256()
    if os.path.isdir(path):
        for root, dirs, files in os.walk(path):
            dirs.sort()
            for name in sorted(files):
                full = os.path.join(root, name)
                h.update(os.path.relpath(full, path).encode())
                h.update(sha256_path(full).encode())
        return h.hexdigest()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclasses.dataclass
class RunManifest:
    """Per-workspace record of stage inputs, outputs and configuration."""

    workspace: str
    stages: dict = dataclasses.field(default_factory=dict)

    @property
    def path(self) -> str:
        return os.path.join(self.workspace, MANIFEST_NAME)

    @classmethod
    def load(cls, workspace) -> "RunManifest":
        m = cls(os.path.abspath(workspace))
        try:
            with open(m.path, encoding="utf-8") as fh:
                m.stages = json.load(fh).get("stages", {})
        except (OSError, json.JSONDecodeError, AttributeError):
            m.stages = {}
        return m

    def is_current(self, key, inputs: dict, options: dict) -> bool:
        rec = self.stages.get(key)
        if not rec or rec.get("inputs") != inputs or rec.get("options") != options:
            return False
        for path, digest in rec.get("outputs", {}).items():
            if not os.path.exists(path) or sha256_path(path) != digest:
                return False
        return True

    def record(self, key, inputs: dict, options: dict, outputs, config=None) -> None:
        self.stages[key] = {"inputs": inputs, "options": options,
                            "outputs": {os.path.abspath(p): sha256_path(p) for p in outputs
                                        if os.path.exists(p)},
                            "config": config}
        os.makedirs(self.workspace, exist_ok=True)
        with atomic_file(self.path, "w") as fh:
            json.dump({"workspace": self.workspace, "stages": self.stages}, fh, indent=1,
                      sort_keys=True)


@contextlib.contextmanager
def atomic_file(path, mode="wb"):
    """Write to a temporary sibling and move it into place on success.

    With ``mode=None`` the temporary path itself is yielded; it keeps the
    target's extension so format-sniffing writers behave.
    """
    path = os.path.abspath(path)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=os.path.splitext(path)[1],
                               dir=os.path.dirname(path))
    os.close(fd)
    try:
        if mode is None:
            yield tmp
        else:
            with open(tmp, mode, **({} if "b" in mode else {"encoding": "utf-8"})) as fh:
                yield fh
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


@contextlib.contextmanager
def atomic_dir(path):
    """Populate a temporary directory, then swap it in for ``path``."""
    path = os.path.abspath(path)
    parent = os.path.dirname(path)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".tmp-", dir=parent)
    try:
        yield tmp
        if os.path.isdir(path):
            old = tempfile.mkdtemp(prefix=".old-", dir=parent)
            os.rmdir(old)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, path)
    finally:
        if os.path.isdir(tmp):
            shutil.rmtree(tmp, ignore_errors=True)


def write_json(path, doc) -> None:
    with atomic_file(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_jsonable)


def _jsonable(obj):
    import numpy as np
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serialisable: {type(obj).__name__}")


def write_ply_atomic(cloud, path) -> None:
    from .io.ply import write_ply
    with atomic_file(path, None) as tmp:
        write_ply(cloud, tmp)


# ---------------------------------------------------------------- data loading

def _image_stem(name: str) -> str:
    return os.path.splitext(os.path.basename(name))[0]


def _parse_view_list(spec):
    if not spec:
        return None
    if spec.startswith("@"):
        with open(spec[1:], encoding="utf-8") as fh:
            text = fh.read()
        try:
            doc = json.loads(text)
            items = doc["images"] if isinstance(doc, dict) else doc
        except (json.JSONDecodeError, KeyError, TypeError):
            items = text.split()
    else:
        items = spec.split(",")
    return {_image_stem(s.strip()) for s in items if s.strip()}


def load_model_views(model_dir, images_dir=None, *, views=None, exclude=None):
    """Cameras (and optionally images) of a COLMAP model, filtered by name."""
    from .errors import InputError
    from .io.colmap import parse_colmap_text
    from .io.images import load_image
    model = parse_colmap_text(model_dir)
    out = []
    for im in model.images:
        stem = _image_stem(im.name)
        if views is not None and stem not in views:
            continue
        if exclude is not None and stem in exclude:
            continue
        cam = model.camera(im)
        cam.id = stem
        img = None
        if images_dir is not None:
            path = os.path.join(images_dir, im.name)
            if not os.path.exists(path):
                raise InputError(f"{path}: image listed in the model is missing")
            img = load_image(path)
            if img.shape[:2] != cam.shape:
                raise InputError(f"{path}: image is {img.shape[1]}x{img.shape[0]}, camera "
                                 f"expects {cam.width}x{cam.height}")
        out.append((cam, img))
    if views is not None:
        missing = views - {c.id for c, _ in out}
        if missing:
            raise InputError(f"views not in the model: {', '.join(sorted(missing))}")
    if not out:
        raise InputError("no views selected")
    return model, out


def load_masks(mask_dir, cameras, classes, *, required=False):
    from .errors import InputError
    from .io.images import load_label_mask
    import numpy as np
    colors = [c.color for c in classes]
    out = []
    for cam in cameras:
        path = os.path.join(mask_dir, cam.id + ".png")
        if not os.path.exists(path):
            if required:
                raise InputError(f"{path}: mask missing")
            log.warning("no mask for %s, treating it as undamaged", cam.id)
            out.append(np.zeros(cam.shape, np.int64))
            continue
        m = load_label_mask(path, colors)
        if m.shape != cam.shape:
            raise InputError(f"{path}: mask size does not match camera {cam.id}")
        out.append(m)
    return out


def load_camera(spec, model_dir=None):
    """A camera from a model image id/name or from a pose JSON file."""
    from .errors import InputError
    from .gaussians import Camera, quat_to_rotmat
    import numpy as np
    if spec.endswith(".json") and os.path.exists(spec):
        with open(spec, encoding="utf-8") as fh:
            doc = json.load(fh)
        try:
            if "rotation" in doc:
                R = np.asarray(doc["rotation"], dtype=np.float64)
            else:
                q = np.asarray(doc["qvec"], dtype=np.float64)
                R = quat_to_rotmat(q / np.linalg.norm(q))
            t = doc.get("translation", doc.get("tvec", [0.0, 0.0, 0.0]))
            return Camera(doc["fx"], doc.get("fy", doc["fx"]), doc["cx"], doc["cy"],
                          doc["width"], doc["height"], R, t, doc.get("id", _image_stem(spec)))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{spec}: invalid pose file ({exc})") from None
    if model_dir is None:
        raise InputError("--camera by id needs --model")
    from .io.colmap import parse_colmap_text
    model = parse_colmap_text(model_dir)
    try:
        im = model.image(spec)
    except KeyError:
        raise InputError(f"camera {spec!r} not found in {model_dir}") from None
    cam = model.camera(im)
    cam.id = _image_stem(im.name)
    return cam


# ---------------------------------------------------------------- subcommands

def cmd_synth(args):
    from .synth import SynthSpec, add_progression, generate_scene, write_scene
    spec = SynthSpec.from_json(args.spec) if args.spec else SynthSpec()
    if args.seed is not None:
        spec.seed = args.seed
    for name in ("width", "height", "n_cameras"):
        if getattr(args, name) is not None:
            setattr(spec, name, getattr(args, name))
    spec = SynthSpec.from_dict(spec.to_dict())
    scene = generate_scene(spec)
    prog = add_progression(scene, n_views=args.new_views) if args.progression else None
    with atomic_dir(args.out) as tmp:
        write_scene(scene, tmp, prog)
    return [args.out], {"spec": spec.to_dict()}


def _composited(views, masks, classes):
    from .damage import composite_mask
    return [(c, composite_mask(img, m, classes)) for (c, img), m in zip(views, masks)]


def cmd_train(args):
    from .damage import load_classes
    from .errors import InputError
    from .hierarchy import downsample_image
    from .io.ply import read_ply
    from .optimizer import View, init_from_points, train
    cfg = resolve_config(args)
    model, views = load_model_views(args.model, args.images, views=_parse_view_list(args.views),
                                    exclude=_parse_view_list(args.exclude))
    cams = [c for c, _ in views]
    if args.masks:
        if not args.classes:
            raise InputError("--masks needs --classes")
        classes = load_classes(args.classes)
        views = _composited(views, load_masks(args.masks, cams, classes), classes)
    if args.init:
        cloud = read_ply(args.init)
    else:
        if not len(model.points):
            raise InputError(f"{args.model}: the model has no 3D points to start from")
        cloud = init_from_points(model.points, model.point_colors, cams, sh_degree=cfg.sh_degree)
    f = args.downsample
    if f > 1:
        views = [(c.downscaled(f), downsample_image(img, f)) for c, img in views]
    out, report = train(cloud, [View(c, img) for c, img in views], cfg)
    write_ply_atomic(out, args.out)
    rep = report.to_dict()
    rep.update(views=[c.id for c, _ in views], count=out.count, downsample=f)
    report_path = args.report or os.path.splitext(args.out)[0] + ".report.json"
    write_json(report_path, rep)
    return [args.out, report_path], cfg.to_dict()


def cmd_render(args):
    from .damage import extract_mask, load_classes
    from .errors import InputError
    from .io.images import save_image, save_label_mask
    from .io.ply import read_ply
    from .rasterizer import render_image
    cloud = read_ply(args.ply)
    cam = load_camera(args.camera, args.model)
    img = render_image(cloud, cam, background=tuple(args.background))
    with atomic_file(args.out, None) as tmp:
        save_image(img, tmp)
    outputs = [args.out]
    if args.extract_masks:
        if not args.classes:
            raise InputError("--extract-masks needs --classes")
        classes = load_classes(args.classes)
        mpath = args.mask_out or os.path.splitext(args.out)[0] + "_mask.png"
        with atomic_file(mpath, None) as tmp:
            save_label_mask(extract_mask(img, classes), [c.color for c in classes], tmp)
        outputs.append(mpath)
    return outputs, None


def cmd_select(args):
    from .damage import load_classes
    from .hierarchy import select
    from .io.ply import read_ply
    cloud = read_ply(args.ply)
    classes = load_classes(args.classes)
    _, views = load_model_views(args.model, None, views=_parse_view_list(args.views),
                                exclude=_parse_view_list(args.exclude))
    cams = [c for c, _ in views]
    masks = load_masks(args.masks, cams, classes)
    sel = select(cloud, classes, masks, cams, k_min=args.k_min, v_min=args.v_min,
                 hull_dilation_px=args.hull_dilation)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    hull_dir = os.path.splitext(os.path.abspath(args.out))[0] + "_hulls"
    with atomic_dir(hull_dir) as tmp_hulls:
        with atomic_file(args.out, None) as tmp:
            sel.save(tmp, tmp_hulls)
            # references must point at the final hull directory
            with open(tmp, encoding="utf-8") as fh:
                doc = json.load(fh)
            doc["hull_masks"] = {k: os.path.relpath(os.path.join(hull_dir, os.path.basename(v)),
                                                    out_dir)
                                 for k, v in doc["hull_masks"].items()}
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, indent=1)
    log.info("selected %d damage and %d neighbour primitives", len(sel.damage_indices),
             len(sel.neighbor_indices))
    return [args.out, hull_dir], None


def cmd_refine(args):
    from .damage import load_classes
    from .errors import ConsistencyError, InputError
    from .hierarchy import REFINE_ITERATIONS, Selection, refine
    from .io.ply import read_ply
    from .optimizer import View
    cfg = resolve_config(args, defaults={"iterations": REFINE_ITERATIONS})
    cloud = read_ply(args.ply)
    sel = Selection.load(args.selection)
    if not len(sel.indices):
        raise InputError(f"{args.selection}: the selection is empty, nothing to refine")
    names = _parse_view_list(args.views)
    if names is None:
        names = {k for k, m in sel.hull_masks.items() if m.any()}
    _, views = load_model_views(args.model, args.images, views=names)
    if args.masks:
        if not args.classes:
            raise InputError("--masks needs --classes")
        classes = load_classes(args.classes)
        views = _composited(views, load_masks(args.masks, [c for c, _ in views], classes),
                            classes)
    before = cloud.count
    out, report = refine(cloud, sel, [View(c, img) for c, img in views], cfg, args.mode)
    if args.mode == "finetune" and out.count != before:
        raise ConsistencyError(f"finetune changed the primitive count ({before} -> {out.count})")
    write_ply_atomic(out, args.out)
    rep = report.to_dict()
    rep.update(mode=args.mode, count_before=before, count_after=out.count,
               count_unchanged=out.count == before, views=sorted(names))
    report_path = args.report or os.path.splitext(args.out)[0] + ".report.json"
    write_json(report_path, rep)
    return [args.out, report_path], cfg.to_dict()


def _save_progression(prog, classes, path):
    from .io.images import save_label_mask
    from .twin import NEW_OFFSET, new_class_labels
    import numpy as np
    children = new_class_labels(classes)
    labels = np.where(prog >= NEW_OFFSET, 0, prog)
    for k in np.unique(prog[prog >= NEW_OFFSET]):
        labels[prog == k] = children[int(k) - NEW_OFFSET]
    with atomic_file(path, None) as tmp:
        save_label_mask(labels, [c.color for c in classes], tmp)


def cmd_update(args):
    from .damage import load_classes, save_classes
    from .io.ply import read_ply
    from .hierarchy import REFINE_ITERATIONS
    from .twin import plan_update, update_model, with_new_classes
    cfg = resolve_config(args, defaults={"iterations": REFINE_ITERATIONS})
    cloud = read_ply(args.ply)
    classes = load_classes(args.classes)
    survey = _parse_view_list("@" + args.new_survey)
    _, views = load_model_views(args.joint_model, args.images, views=survey)
    cams = [c for c, _ in views]
    masks = load_masks(args.masks, cams, classes, required=True)
    plan = plan_update(cloud, cams, [img for _, img in views], masks, classes,
                       tolerance_px=args.tolerance_px)
    out, report = update_model(cloud, plan, classes, cfg, args.mode,
                               min_new_pixels=args.min_new_pixels)
    ext = report.classes if report.classes else with_new_classes(classes)
    write_ply_atomic(out, args.out)
    with atomic_dir(args.progression_out) as tmp:
        for cam, prog in zip(cams, plan.progression_masks):
            _save_progression(prog, ext, os.path.join(tmp, cam.id + ".png"))
        save_classes(ext, os.path.join(tmp, "classes.json"))
        rep = report.to_dict()
        rep["views"] = [c.id for c in cams]
        rep["shrinkage_per_view"] = {c.id: int(s.sum()) for c, s in zip(cams, plan.shrinkage)}
        with open(os.path.join(tmp, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(rep, fh, indent=2, default=_jsonable)
    return [args.out, args.progression_out], cfg.to_dict()


def cmd_diff_masks(args):
    from .damage import load_classes, save_classes
    from .errors import InputError
    from .io.images import load_label_mask, save_mask
    from .twin import NEW_OFFSET, diff_masks, with_new_classes
    classes = load_classes(args.classes)
    names = sorted(f for f in os.listdir(args.new) if f.lower().endswith(".png"))
    if not names:
        raise InputError(f"{args.new}: no PNG masks")
    colors = [c.color for c in classes]
    diffs = {}
    for name in names:
        old_path = os.path.join(args.old, name)
        if not os.path.exists(old_path):
            raise InputError(f"{old_path}: no matching old mask")
        d = diff_masks(load_label_mask(os.path.join(args.new, name), colors),
                       load_label_mask(old_path, colors), args.tolerance_px)
        diffs[name] = d
    roots = {int(k) - NEW_OFFSET for d in diffs.values() for k in set(d.progression.ravel())
             if k >= NEW_OFFSET}
    ext = with_new_classes(classes, roots=roots)
    summary = {}
    with atomic_dir(args.out) as tmp:
        for name, d in diffs.items():
            _save_progression(d.progression, ext, os.path.join(tmp, name))
            save_mask(d.shrinkage, os.path.join(tmp, os.path.splitext(name)[0] + "_shrinkage.png"))
            summary[name] = {"new_pixels": int((d.progression >= NEW_OFFSET).sum()),
                             "preexisting_pixels": int(((d.progression > 0)
                                                        & (d.progression < NEW_OFFSET)).sum()),
                             "shrinkage_pixels": int(d.shrinkage.sum())}
        save_classes(ext, os.path.join(tmp, "classes.json"))
        with open(os.path.join(tmp, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
    return [args.out], None


def cmd_metrics(args):
    import numpy as np
    from .damage import composite_mask, extract_mask, load_classes, mask_iou
    from .io.ply import read_ply
    from .optimizer import psnr
    from .rasterizer import render_image
    cloud = read_ply(args.ply)
    classes = load_classes(args.classes)
    _, views = load_model_views(args.model, args.images, views=_parse_view_list(args.views),
                                exclude=_parse_view_list(args.exclude))
    cams = [c for c, _ in views]
    gts = load_masks(args.gt_masks, cams, classes)
    per_view = {}
    for (cam, img), gt in zip(views, gts):
        rendered = render_image(cloud, cam)
        labels = extract_mask(rendered, classes)
        rec = {"iou": {c.name: mask_iou(labels, gt, k + 1) for k, c in enumerate(classes)
                       if c.parent is None}}
        if img is not None:
            rec["psnr"] = psnr(rendered, composite_mask(img, gt, classes))
        per_view[cam.id] = rec
    mean_iou = {c.name: float(np.mean([v["iou"][c.name] for v in per_view.values()]))
                for c in classes if c.parent is None}
    doc = {"views": per_view, "mean_iou": mean_iou, "count": cloud.count}
    if any("psnr" in v for v in per_view.values()):
        doc["mean_psnr"] = float(np.mean([v["psnr"] for v in per_view.values()]))
    write_json(args.out, doc)
    return [args.out], None


# ---------------------------------------------------------------- parser & main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splattwin", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads for the kernels (0 = all cores)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--force", action="store_true", help="rerun even if inputs are unchanged")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                        help="kernels always reduce in a fixed order; kept for scripts")
    common.add_argument("--log-level", default=None)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic facade dataset")
    s.add_argument("--spec")
    s.add_argument("--out", required=True)
    s.add_argument("--progression", action="store_true", help="also emit a second survey")
    s.add_argument("--new-views", type=int, default=8)
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--n-cameras", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="reconstruct (optionally damage-coded)")
    t.add_argument("--model", required=True, help="COLMAP text model directory")
    t.add_argument("--images", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--masks")
    t.add_argument("--classes")
    t.add_argument("--init", help="start from this PLY instead of the model points")
    t.add_argument("--views", help="comma list or @file of image names to use")
    t.add_argument("--exclude", help="comma list or @file of image names to skip")
    t.add_argument("--downsample", type=int, default=1)
    t.add_argument("--report")
    add_config_flags(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", parents=[common], help="render one view")
    r.add_argument("--ply", required=True)
    r.add_argument("--camera", required=True, help="image name/id in --model, or a pose JSON")
    r.add_argument("--model")
    r.add_argument("--out", required=True)
    r.add_argument("--extract-masks", action="store_true")
    r.add_argument("--classes")
    r.add_argument("--mask-out")
    r.add_argument("--background", nargs=3, type=float, default=(0.0, 0.0, 0.0))
    r.set_defaults(func=cmd_render)

    s = sub.add_parser("select", parents=[common], help="select damage primitives and hulls")
    s.add_argument("--ply", required=True)
    s.add_argument("--masks", required=True)
    s.add_argument("--classes", required=True)
    s.add_argument("--model", required=True, help="COLMAP model with the mask cameras")
    s.add_argument("--out", required=True)
    s.add_argument("--views")
    s.add_argument("--exclude")
    s.add_argument("--k-min", type=int, default=50)
    s.add_argument("--v-min", type=int, default=2)
    s.add_argument("--hull-dilation", type=float, default=8.0)
    s.set_defaults(func=cmd_select)

    f = sub.add_parser("refine", parents=[common], help="refine selected primitives")
    f.add_argument("--ply", required=True)
    f.add_argument("--selection", required=True)
    f.add_argument("--images", required=True)
    f.add_argument("--model", required=True)
    f.add_argument("--views", help="comma list or @file; default: views with a hull")
    f.add_argument("--mode", choices=("finetune", "retrain"), default="finetune")
    f.add_argument("--masks", help="composite these masks onto the images first")
    f.add_argument("--classes")
    f.add_argument("--out", required=True)
    f.add_argument("--report")
    add_config_flags(f)
    f.set_defaults(func=cmd_refine)

    u = sub.add_parser("update", parents=[common], help="absorb a new survey")
    u.add_argument("--ply", required=True)
    u.add_argument("--joint-model", required=True)
    u.add_argument("--new-survey", required=True, help="JSON listing the new image names")
    u.add_argument("--images", required=True)
    u.add_argument("--masks", required=True)
    u.add_argument("--classes", required=True)
    u.add_argument("--out", required=True)
    u.add_argument("--progression-out", required=True)
    u.add_argument("--mode", choices=("finetune", "retrain"), default="retrain")
    u.add_argument("--tolerance-px", type=float, default=3.0)
    u.add_argument("--min-new-pixels", type=int, default=12)
    add_config_flags(u)
    u.set_defaults(func=cmd_update)

    d = sub.add_parser("diff-masks", parents=[common], help="progression masks from two mask sets")
    d.add_argument("--old", required=True)
    d.add_argument("--new", required=True)
    d.add_argument("--classes", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--tolerance-px", type=float, default=3.0)
    d.set_defaults(func=cmd_diff_masks)

    m = sub.add_parser("metrics", parents=[common], help="IoU / PSNR report")
    m.add_argument("--ply", required=True)
    m.add_argument("--gt-masks", required=True)
    m.add_argument("--classes", required=True)
    m.add_argument("--model", required=True)
    m.add_argument("--images")
    m.add_argument("--views")
    m.add_argument("--exclude")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_metrics)
    return p


def _env_default(args, name, cast):
    if getattr(args, name, None) is None and ENV_PREFIX + name.upper() in os.environ:
        setattr(args, name, cast(os.environ[ENV_PREFIX + name.upper()]))


def _input_paths(args) -> list:
    keys = ("spec", "model", "images", "masks", "classes", "init", "config", "ply", "selection",
            "joint_model", "new_survey", "old", "new", "gt_masks")
    out = []
    for k in keys:
        v = getattr(args, k, None)
        if isinstance(v, str) and os.path.exists(v):
            out.append(v)
    cam = getattr(args, "camera", None)
    if isinstance(cam, str) and os.path.exists(cam):
        out.append(cam)
    return out


def _fail(code: str, message: str) -> int:
    print(f"error: {code}: {' '.join(str(message).split())}", file=sys.stderr)
    return EXIT_CODES.get(code, 1)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _env_default(args, "threads", int)
    _env_default(args, "seed", int)
    logging.basicConfig(level=(args.log_level or os.environ.get(ENV_PREFIX + "LOG_LEVEL")
                               or "INFO").upper(),
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    if args.threads:
        if "numba" in sys.modules:
            import numba
            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        else:
            os.environ["NUMBA_NUM_THREADS"] = str(args.threads)

    from .errors import SplatError
    try:
        inputs = {os.path.abspath(p): sha256_path(p) for p in _input_paths(args)}
        options = {k: v for k, v in sorted(vars(args).items()) if k not in VOLATILE}
        options = json.loads(json.dumps(options, default=str))
        options.update({k: os.environ[k] for k in sorted(os.environ)
                        if k.startswith(ENV_PREFIX) and k[len(ENV_PREFIX):].lower()
                        not in VOLATILE})
        out = getattr(args, "out", None) or "."
        workspace = os.path.dirname(os.path.abspath(out))
        manifest = RunManifest.load(workspace)
        key = f"{args.command}:{os.path.abspath(out)}"
        if not args.force and manifest.is_current(key, inputs, options):
            log.info("%s is up to date; use --force to rerun", args.command)
            return 0
        outputs, config = args.func(args)
        manifest.record(key, inputs, options, outputs, config)
        return 0
    except SplatError as exc:
        return _fail(exc.code, exc)
    except FileNotFoundError as exc:
        return _fail("input", f"{exc.filename}: no such file or directory")
    except OSError as exc:
        return _fail("io", exc)
    except ValueError as exc:
        return _fail("input", exc)


if __name__ == "__main__":
    sys.exit(main())
