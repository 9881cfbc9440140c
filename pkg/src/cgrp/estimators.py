"""scikit-learn style wrappers around the staged training and inference.

Inputs follow one layout throughout: ``X`` has shape ``(n_samples, 2, H, W)``
with the visible image in channel 0 and the (possibly misaligned) infrared
image in channel 1, all values in [0, 1]. Outputs are ``(n_samples, H, W)``
gray stacks, or ``(n_samples, 2, H, W)`` for deformation fields.
"""
from __future__ import annotations

import copy

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .datasets import PairRecord
from .geometry import DeformationField, warp_tensor
from .images import check_image_stack, check_pair_stack
from .losses import LossWeights, VGGFeatures
from .metrics import ncc
from .pipeline import CGRPModel
from .trainer import TrainConfig, train_stage


def _records(X: np.ndarray, y: np.ndarray | None) -> list[PairRecord]:
    out = []
    for i, pair in enumerate(X):
        vis, ir = pair[0], pair[1]
        aligned = ir if y is None else y[i]
        out.append(PairRecord(vis, aligned, ir, DeformationField.zeros(*vis.shape), "fit", str(i)))
    return out


def _stack(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype(np.float32)


class _CGRPEstimator(BaseEstimator):
    """Shared training hyperparameters and model bookkeeping.

    ``model`` optionally warm-starts from an existing :class:`CGRPModel` or a
    checkpoint path; it is copied, never modified. ``patch=None`` trains on
    the largest square patch the images allow. ``loss`` takes a
    :class:`LossWeights` or a plain dict of overrides.
    """

    def __init__(self, batch_size=8, patch=None, epochs=300, max_steps=None, lr=1e-3,
                 loss=None, backbone_weights="imagenet", seed=0, model=None, batch_infer=8):
        self.batch_size = batch_size
        self.patch = patch
        self.epochs = epochs
        self.max_steps = max_steps
        self.lr = lr
        self.loss = loss
        self.backbone_weights = backbone_weights
        self.seed = seed
        self.model = model
        self.batch_infer = batch_infer

    def _loss_weights(self, **overrides) -> LossWeights:
        if self.loss is None:
            w = LossWeights()
        elif isinstance(self.loss, LossWeights):
            w = self.loss
        else:
            w = LossWeights().replace(**dict(self.loss))
        return w.replace(**overrides) if overrides else w

    def _initial_model(self) -> CGRPModel:
        if self.model is None:
            return CGRPModel.create(self.seed)
        if isinstance(self.model, CGRPModel):
            return copy.deepcopy(self.model)
        return CGRPModel.from_checkpoint(self.model)

    def _train(self, model, stage, records, backbone=None, **config):
        h, w = records[0].shape
        patch = self.patch if self.patch is not None else min(h, w)
        cfg = TrainConfig(stage=stage, batch_size=self.batch_size, patch=patch, epochs=self.epochs,
                          max_steps=self.max_steps, lr=self.lr, seed=self.seed,
                          backbone_weights=self.backbone_weights, **config)
        model, ledger, _ = train_stage(cfg, records, model, backbone=backbone)
        self.ledgers_.append(ledger)
        return model

    def _backbone(self, w: LossWeights):
        return VGGFeatures(w.layer_ids, weights=self.backbone_weights, seed=self.seed)

    def _batches(self, X: np.ndarray):
        for start in range(0, len(X), self.batch_infer):
            chunk = torch.from_numpy(X[start:start + self.batch_infer])
            yield chunk[:, 0:1], chunk[:, 1:2]

    def _check_input(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_pair_stack(X)
        if X.shape[-2:] != self.image_shape_:
            raise ValueError(f"fitted on {self.image_shape_} images, got {X.shape[-2:]}")
        return X


class PseudoInfraredTranslator(TransformerMixin, _CGRPEstimator):
    """Learns the visible -> infrared style translation (unpaired cycle training).

    ``transform`` returns the pseudo-infrared image of each visible input;
    the infrared channel of ``X`` is only used during ``fit``.
    ``disable_lpst`` / ``disable_lcross`` zero the perceptual-style and the
    cross-path terms.
    """

    def __init__(self, batch_size=8, patch=None, epochs=300, max_steps=None, lr=1e-3, loss=None,
                 backbone_weights="imagenet", seed=0, model=None, batch_infer=8,
                 disable_lpst=False, disable_lcross=False):
        super().__init__(batch_size, patch, epochs, max_steps, lr, loss, backbone_weights, seed, model,
                         batch_infer)
        self.disable_lpst = disable_lpst
        self.disable_lcross = disable_lcross

    def fit(self, X, y=None):
        X = check_pair_stack(X)
        overrides = {}
        if self.disable_lpst:
            overrides.update(perceptual=0.0, style=0.0)
        if self.disable_lcross:
            overrides.update(content=0.0, edge=0.0)
        w = self._loss_weights(**overrides)
        self.ledgers_ = []
        self.model_ = self._train(self._initial_model(), "cpstn", _records(X, None),
                                  self._backbone(w), loss=w)
        self.image_shape_ = X.shape[-2:]
        return self

    def transform(self, X):
        X = self._check_input(X)
        out = [self.model_.cpstn.translate(vis, "vis->ir") for vis, _ in self._batches(X)]
        return _stack(torch.cat(out))[:, 0]


class InfraredRegistrar(TransformerMixin, _CGRPEstimator):
    """Learns the deformation field aligning the infrared channel to the visible one.

    ``pseudo_source`` picks the registration target during training:
    ``"cpstn"`` (requires a ``model`` with a trained translator, or
    ``train_translator=True``), ``"visible"`` or ``"aligned"`` (ground-truth
    aligned infrared passed as ``y``). At inference the target is always the
    pseudo-infrared image unless ``pseudo_source="visible"``.
    """

    def __init__(self, batch_size=8, patch=None, epochs=300, max_steps=None, lr=1e-3, loss=None,
                 backbone_weights="imagenet", seed=0, model=None, batch_infer=8,
                 pseudo_source="cpstn", train_translator=False):
        super().__init__(batch_size, patch, epochs, max_steps, lr, loss, backbone_weights, seed, model,
                         batch_infer)
        self.pseudo_source = pseudo_source
        self.train_translator = train_translator

    def fit(self, X, y=None):
        X = check_pair_stack(X)
        if self.pseudo_source == "aligned":
            if y is None:
                raise ValueError("pseudo_source='aligned' needs the aligned infrared images as y")
            y = check_image_stack(y, "y")
            if y.shape != X[:, 1].shape:
                raise ValueError(f"y has shape {y.shape}, expected {X[:, 1].shape}")
        else:
            y = None
        w = self._loss_weights()
        backbone = self._backbone(w)
        records = _records(X, y)
        self.ledgers_ = []
        model = self._initial_model()
        if self.train_translator:
            model = self._train(model, "cpstn", records, backbone, loss=w)
        self.model_ = self._train(model, "mrrn", records, backbone, loss=w,
                                  pseudo_source=self.pseudo_source)
        self.image_shape_ = X.shape[-2:]
        return self

    def _target(self, vis):
        if self.pseudo_source == "visible":
            return vis
        return self.model_.cpstn.translate(vis, "vis->ir")

    @torch.no_grad()
    def predict_field(self, X) -> np.ndarray:
        """Pull-fields ``(n_samples, 2, H, W)`` in pixels (channel 0 = dx)."""
        X = self._check_input(X)
        self.model_.eval()
        out = [self.model_.mrrn(self._target(vis), ir)[0] for vis, ir in self._batches(X)]
        return _stack(torch.cat(out))

    def transform(self, X):
        """Registered infrared images."""
        X = self._check_input(X)
        fields = torch.from_numpy(self.predict_field(X))
        ir = torch.from_numpy(X[:, 1:2])
        return _stack(warp_tensor(ir, fields).clamp(0.0, 1.0))[:, 0]

    def score(self, X, y):
        """Mean normalized cross-correlation of the registered infrared with ``y``."""
        reg = self.transform(X)
        y = check_image_stack(y, "y")
        return float(np.nanmean([ncc(a, b) for a, b in zip(reg, y)]))


class MisalignedFusion(TransformerMixin, _CGRPEstimator):
    """End-to-end translate -> register -> fuse model for misaligned pairs.

    ``fit`` trains the three stages in order (``joint=True`` adds a final
    end-to-end pass). ``transform``/``predict`` return the fused images;
    :meth:`transform_all` also returns the intermediates. The ``disable_*``
    switches are the ablation conditions: register directly against the
    visible image, fuse the raw misaligned pair, or replace the attention
    module by concatenation.
    """

    def __init__(self, batch_size=8, patch=None, epochs=300, max_steps=None, lr=1e-3, loss=None,
                 backbone_weights="imagenet", seed=0, model=None, batch_infer=8, joint=False,
                 disable_cpstn=False, disable_mrrn=False, disable_ifm=False):
        super().__init__(batch_size, patch, epochs, max_steps, lr, loss, backbone_weights, seed, model,
                         batch_infer)
        self.joint = joint
        self.disable_cpstn = disable_cpstn
        self.disable_mrrn = disable_mrrn
        self.disable_ifm = disable_ifm

    def fit(self, X, y=None):
        X = check_pair_stack(X)
        w = self._loss_weights()
        backbone = self._backbone(w)
        records = _records(X, None)
        source = "visible" if self.disable_cpstn else "cpstn"
        self.ledgers_ = []
        model = self._initial_model()
        if not self.disable_cpstn:
            model = self._train(model, "cpstn", records, backbone, loss=w)
        model = self._train(model, "mrrn", records, backbone, loss=w, pseudo_source=source)
        model = self._train(model, "difn", records, None, loss=w, pseudo_source=source,
                            use_ifm=not self.disable_ifm)
        if self.joint:
            model = self._train(model, "joint", records, backbone, loss=w, pseudo_source=source,
                                use_ifm=not self.disable_ifm)
        self.model_ = model
        self.image_shape_ = X.shape[-2:]
        return self

    def transform_all(self, X) -> dict:
        X = self._check_input(X)
        parts = {"pseudo_ir": [], "field": [], "ir_reg": [], "fused": []}
        for vis, ir in self._batches(X):
            res = self.model_.infer(vis, ir, disable_cpstn=self.disable_cpstn,
                                    disable_mrrn=self.disable_mrrn, disable_ifm=self.disable_ifm)
            for key in parts:
                parts[key].append(res[key])
        out = {k: _stack(torch.cat(v)) for k, v in parts.items()}
        for key in ("pseudo_ir", "ir_reg", "fused"):
            out[key] = out[key][:, 0]
        return out

    def transform(self, X):
        return self.transform_all(X)["fused"]

    def predict(self, X):
        return self.transform(X)
