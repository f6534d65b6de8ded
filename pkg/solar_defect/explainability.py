import logging
from dataclasses import dataclass
from pathlib import Path

import matplotlib
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .augmentation import load_image, preprocess

logger = logging.getLogger(__name__)

OVERLAY_OPACITY = 0.5
COLORMAP = "jet"


@dataclass
class Heatmap:
    """
    values: input sized map in [0, 1], max 1 unless zero_activation
    coarse: the rectified map at the resolution of the layer, before upsampling
    """

    values: np.ndarray
    coarse: np.ndarray
    target_class: int
    layer_name: str
    zero_activation: bool = False


def find_layer(model, layer_name):
    modules = dict(model.named_modules())
    if layer_name not in modules or layer_name == "":
        top = [name for name in modules if name and "." not in name]
        raise RuntimeError(f"Model has no layer named '{layer_name}', top level layers are {top}")
    return modules[layer_name]


def grad_cam(model, image, target_class, layer="cbam"):
    """
    Gradient weighted class activation map of the pre-softmax logit of target_class
    :param image: Preprocessed 3 x H x W (or 1 x 3 x H x W) tensor
    :param layer: Dotted name of the module whose output is explained
    """
    x = image.unsqueeze(0) if image.dim() == 3 else image
    if x.dim() != 4 or x.shape[0] != 1:
        raise RuntimeError(f"grad_cam explains one image at a time, got shape {tuple(image.shape)}")
    x = x.detach().clone().requires_grad_(True)
    module = find_layer(model, layer)

    captured = {}

    def keep_output(_module, _inputs, output):
        captured["activation"] = output

    handle = module.register_forward_hook(keep_output)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logits = model(x)
    finally:
        handle.remove()
        model.train(was_training)

    activation = captured.get("activation")
    if not isinstance(activation, torch.Tensor) or activation.dim() != 4:
        raise RuntimeError(f"Layer '{layer}' does not output a N x C x h x w feature map")
    if not activation.requires_grad:
        raise RuntimeError(f"The output of layer '{layer}' is not differentiable")
    if not 0 <= target_class < logits.shape[1]:
        raise RuntimeError(f"target_class must be in [0, {logits.shape[1] - 1}], got {target_class}")

    (gradient,) = torch.autograd.grad(logits[0, target_class], activation, allow_unused=True)
    if gradient is None:
        gradient = torch.zeros_like(activation)
    weights = gradient.mean(dim=(2, 3), keepdim=True)
    cam = torch.relu((weights * activation).sum(dim=1, keepdim=True)).detach()
    upsampled = F.interpolate(cam, size=tuple(x.shape[-2:]), mode="bilinear", align_corners=False)[0, 0]

    coarse = cam[0, 0].double().numpy()
    values = upsampled.double().numpy()
    peak = values.max()
    if peak > 0:
        return Heatmap(values / peak, coarse, target_class, layer)
    return Heatmap(np.zeros_like(values), coarse, target_class, layer, zero_activation=True)


def overlay(heatmap, image):
    """
    Blends the heatmap, colored from blue (0) to red (1), with the image
    :param image: H x W x 3 image, float in [0, 1] or uint8
    :return: H x W x 3 uint8 composite
    """
    image = np.asarray(image)
    if image.dtype == np.uint8:
        image = image.astype(np.float64) / 255
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[:2] != heatmap.values.shape:
        raise RuntimeError(
            f"Image of shape {image.shape} does not match the heatmap of shape {heatmap.values.shape}"
        )
    colors = matplotlib.colormaps[COLORMAP](heatmap.values)[..., :3]
    composite = (1 - OVERLAY_OPACITY) * np.clip(image, 0, 1) + OVERLAY_OPACITY * colors
    return np.round(composite * 255).astype(np.uint8)


def save_overlay_png(composite, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(composite).save(path)
    return path


def save_heatmap_csv(heatmap, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, heatmap.values, delimiter=",", fmt="%.6f")
    return path


def quadrant_mask(shape, quadrant):
    """
    quadrant 0: top left, 1: top right, 2: bottom left, 3: bottom right
    """
    if quadrant not in (0, 1, 2, 3):
        raise RuntimeError(f"quadrant must be in [0, 3], got {quadrant}")
    height, width = shape
    mask = np.zeros((height, width), dtype=bool)
    rows = slice(0, height // 2) if quadrant < 2 else slice(height // 2, height)
    cols = slice(0, width // 2) if quadrant % 2 == 0 else slice(width // 2, width)
    mask[rows, cols] = True
    return mask


def heatmap_mass_inside(heatmap, mask):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != heatmap.values.shape:
        raise RuntimeError(f"Mask of shape {mask.shape} does not match the heatmap of shape {heatmap.values.shape}")
    total = heatmap.values.sum()
    return float(heatmap.values[mask].sum() / total) if total > 0 else 0.0


def render_gallery(model, records, classes, preprocess_spec, out_dir, layer="cbam", target="predicted"):
    """
    Writes an overlay PNG and a CSV grid per record
    :param target: "predicted" explains the predicted class, "true" the labelled one
    :return: list of (record, Heatmap)
    """
    out_dir = Path(out_dir)
    class_to_index = {c: i for i, c in enumerate(classes)}
    results = []
    for record in records:
        image = load_image(record.image_ref)
        tensor = preprocess(image, preprocess_spec)
        if target == "true":
            target_class = class_to_index[record.class_label]
        else:
            model.eval()
            with torch.no_grad():
                target_class = int(model(tensor.unsqueeze(0)).argmax(dim=1).item())
        heatmap = grad_cam(model, tensor, target_class, layer)
        size = preprocess_spec.target_size
        resized = np.asarray(
            Image.fromarray(np.round(image * 255).astype(np.uint8)).resize((size, size), Image.Resampling.BILINEAR),
            dtype=np.float64,
        ) / 255
        stem = record.provenance_id.replace("/", "__").rsplit(".", 1)[0]
        save_overlay_png(overlay(heatmap, resized), out_dir / f"{stem}.png")
        save_heatmap_csv(heatmap, out_dir / f"{stem}.csv")
        results.append((record, heatmap))
    logger.info("Wrote %d Grad-CAM overlays to %s", len(results), out_dir)
    return results
