"""Scikit-learn style wrappers around training and damage labelling.

``X`` is a sequence of views (``(camera, image)`` pairs or :class:`View`)
for ``fit`` and a sequence of cameras for ``transform``/``predict``.
"""
from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .damage import composite_mask, extract_mask, mask_iou, validate_classes
from .gaussians import GaussianCloud
from .hierarchy import color_labels
from .optimizer import TrainConfig, View, init_from_points, psnr, train
from .rasterizer import render_image
from .validation import check_cameras, check_label_mask, check_views


class SplatReconstructor(BaseEstimator):
    """Fit a Gaussian cloud to posed images; ``transform`` renders cameras.

    Parameters mirror the most used :class:`TrainConfig` fields; ``config``
    supplies the rest and is overridden by the explicit ones.
    """

    def __init__(self, iterations=3000, sh_degree=1, densify=True, sh_lr=2.5e-3,
                 background=(0.0, 0.0, 0.0), seed=0, config=None):
        self.iterations = iterations
        self.sh_degree = sh_degree
        self.densify = densify
        self.sh_lr = sh_lr
        self.background = background
        self.seed = seed
        self.config = config

    def _config(self) -> TrainConfig:
        base = self.config if self.config is not None else TrainConfig()
        if isinstance(base, dict):
            base = TrainConfig.from_dict(base)
        return dataclasses.replace(base, iterations=self.iterations, sh_degree=self.sh_degree,
                                   densify=self.densify, sh_lr=self.sh_lr,
                                   background=tuple(self.background), seed=self.seed)

    def _targets(self, views):
        return views

    def fit(self, X, y=None, *, init=None, points=None, colors=None):
        """``init`` is a starting cloud; otherwise ``points``/``colors`` seed one."""
        views = self._targets(check_views(X))
        cfg = self._config()
        if init is None:
            if points is None:
                raise ValueError("fit needs an initial cloud or sparse points")
            if colors is None:
                colors = np.full((len(points), 3), 0.5)
            init = init_from_points(points, colors, [v.camera for v in views],
                                    sh_degree=cfg.sh_degree)
        elif not isinstance(init, GaussianCloud):
            raise TypeError("init must be a GaussianCloud")
        self.cloud_, self.report_ = train(init, views, cfg)
        self.n_primitives_ = self.cloud_.count
        return self

    def transform(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "cloud_")
        return [render_image(self.cloud_, c, background=tuple(self.background))
                for c in check_cameras(X)]

    def score(self, X, y=None) -> float:
        """Mean PSNR over views ``X`` against their own images."""
        views = self._targets(check_views(X))
        rendered = self.transform([v.camera for v in views])
        return float(np.mean([psnr(r, v.image) for r, v in zip(rendered, views)]))


class DamageVisualizer(SplatReconstructor):
    """Embed damage masks into the cloud as overlay colours.

    ``fit(X, y)`` takes views and their label masks; ``predict`` returns the
    label masks read back from renders at new cameras.
    """

    def __init__(self, classes=(), iterations=3000, sh_degree=1, densify=True, sh_lr=1e-2,
                 background=(0.0, 0.0, 0.0), seed=0, config=None):
        super().__init__(iterations=iterations, sh_degree=sh_degree, densify=densify,
                         sh_lr=sh_lr, background=background, seed=seed, config=config)
        self.classes = classes

    def fit(self, X, y=None, **kwargs):
        if y is None:
            raise ValueError("DamageVisualizer.fit needs label masks as y")
        self.classes_ = validate_classes(self.classes)
        self._masks = list(y)
        try:
            super().fit(X, **kwargs)
        finally:
            del self._masks
        cams = [View(*v).camera if not isinstance(v, View) else v.camera for v in X]
        self.cloud_.damage_label = color_labels(self.cloud_, self.classes_, cams)
        return self

    def _targets(self, views):
        masks = getattr(self, "_masks", None)
        if masks is None:
            return views
        if len(masks) != len(views):
            raise ValueError("need one mask per view")
        n = len(self.classes_)
        return [View(v.camera, composite_mask(v.image, check_label_mask(m, v.camera.shape, n),
                                              self.classes_), v.mask)
                for v, m in zip(views, masks)]

    def predict(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "cloud_")
        return [extract_mask(img, self.classes_) for img in self.transform(X)]

    def score(self, X, y=None) -> float:
        """Mean per-class IoU of predicted masks at the cameras ``X``."""
        if y is None:
            raise ValueError("score needs ground-truth masks")
        pred = self.predict(X)
        ious = [mask_iou(p, g, k + 1) for p, g in zip(pred, y)
                for k in range(len(self.classes_))]
        return float(np.mean(ious))
