"""Grad-CAM over the detector's 3-D feature volumes."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .attention_maps import minmax


def cam_from(activations: torch.Tensor, gradients: torch.Tensor) -> torch.Tensor:
    """Channel weights = spatio-temporal mean gradient; returns ReLU(sum_c w_c A_c).

    activations/gradients: (B, C, N, h, w) -> (B, N, h, w).
    """
    weights = gradients.mean(dim=(2, 3, 4), keepdim=True)
    return F.relu((weights * activations).sum(dim=1))


def grad_cam(model, phi, psi, target: int = 1, layer: str = "ffd.convs", frame_size=None) -> np.ndarray:
    """Per-frame heatmaps in [0, 1] at frame resolution, (B, N, H, W).

    ``target`` 1 explains the fake logit, 0 the real one (negated logit).
    ``layer`` names a module of the detector producing a (B, C, N, h, w) volume.
    """
    module = model.layer(layer)
    store = {}

    def fwd_hook(_m, _inp, out):
        store["act"] = out
        out.register_hook(lambda g: store.__setitem__("grad", g))

    phi_t = torch.as_tensor(np.asarray(phi, dtype=np.float32))
    psi_t = torch.as_tensor(np.asarray(psi, dtype=np.float32))
    if phi_t.ndim == 4:
        phi_t, psi_t = phi_t[None], psi_t[None]
    handle = module.register_forward_hook(fwd_hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            out = model(phi_t, psi_t)
            score = out.logit if target == 1 else -out.logit
            model.zero_grad()
            score.sum().backward()
    finally:
        handle.remove()
        model.train(was_training)
    act, grad = store["act"].detach(), store["grad"].detach()
    if act.ndim != 5:
        raise ValueError(f"layer {layer!r} output has shape {tuple(act.shape)}, expected (B, C, N, h, w)")
    cam = cam_from(act, grad)
    size = frame_size or tuple(phi_t.shape[-2:])
    B, N, h, w = cam.shape
    up = F.interpolate(cam.reshape(B * N, 1, h, w), size=size, mode="bilinear", align_corners=False)
    up = up.reshape(B, N, *size).numpy()
    # a uniform positive map is uniformly salient, not empty
    pos = up.max(axis=(-2, -1), keepdims=True) > 0
    return np.where(pos, minmax(up, constant=1.0), 0.0)
