"""Per-frame object detection and segmentation backends.

Two interchangeable backends produce the same thing: a list of scored,
masked detections for one frame. "neural" fronts a pretrained detector
(boxes) and a promptable segmenter (masks from box prompts); it needs
torch, transformers, segment_anything, and a segmenter checkpoint, and
refuses loudly when any of those is missing. "classical" needs nothing:
luminance contrast against the border-estimated background, connected
components, and the component itself as the mask. Either way boxes
scoring under the confidence threshold are discarded before
segmentation, and the classical score is the box fill ratio, so only
reasonably solid blobs pass.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractViolation, ModelError

CONFIDENCE = 0.7
CONTRAST = 0.15
MIN_AREA = 25

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
_LUMA = np.array([0.2126, 0.7152, 0.0722])


@dataclass
class Detection:
    """One object candidate in one frame; box is half-open pixel coords."""

    box: tuple  # (x0, y0, x1, y1)
    score: float
    mask: np.ndarray  # (H,W) bool
    category: str


class ClassicalBackend:
    """Contrast thresholding plus connected components."""

    name = "classical"

    def __init__(self, confidence: float = CONFIDENCE, contrast: float = CONTRAST,
                 min_area: int = MIN_AREA):
        if not (0.0 < confidence <= 1.0):
            raise ContractViolation(f"confidence must be in (0, 1], got {confidence}")
        if contrast <= 0.0:
            raise ContractViolation("contrast must be positive")
        self.confidence = confidence
        self.contrast = contrast
        self.min_area = max(1, int(min_area))

    def detect(self, image: np.ndarray) -> list:
        lum = image @ _LUMA
        border = np.concatenate([lum[0, :], lum[-1, :], lum[:, 0], lum[:, -1]])
        background = float(np.median(border))
        fg = np.abs(lum - background) > self.contrast
        labels, n = ndimage.label(fg, structure=_EIGHT_CONNECTED)
        out = []
        for li, sl in enumerate(ndimage.find_objects(labels), start=1):
            if sl is None:
                continue
            mask = labels == li
            area = int(mask.sum())
            if area < self.min_area:
                continue
            y0, y1 = sl[0].start, sl[0].stop
            x0, x1 = sl[1].start, sl[1].stop
            fill = area / float((y1 - y0) * (x1 - x0))
            if fill < self.confidence:
                continue
            out.append(Detection((x0, y0, x1, y1), fill, mask, "object"))
        # left-to-right, top-to-bottom; detection order feeds id assignment
        out.sort(key=lambda d: (d.box[0], d.box[1]))
        return out


class NeuralBackend:
    """Pretrained detector boxes prompting a pretrained segmenter.

    Import and checkpoint checks run up front so a misconfigured
    environment fails before any frame is touched.
    """

    name = "neural"

    def __init__(self, confidence: float = CONFIDENCE, segmenter_checkpoint=None,
                 detector: str = "facebook/detr-resnet-50", segmenter_kind: str = "vit_b"):
        try:
            import torch
            from segment_anything import SamPredictor, sam_model_registry
            from transformers import DetrForObjectDetection, DetrImageProcessor
        except ImportError as exc:
            raise ModelError(f"model load failure: {exc}")
        if segmenter_checkpoint is None:
            raise ModelError(
                "model load failure: the neural backend needs --segmenter-checkpoint"
            )
        self._torch = torch
        self.confidence = confidence
        try:
            self.processor = DetrImageProcessor.from_pretrained(detector)
            self.detector = DetrForObjectDetection.from_pretrained(detector).eval()
            sam = sam_model_registry[segmenter_kind](checkpoint=str(segmenter_checkpoint))
            self.segmenter = SamPredictor(sam.eval())
        except Exception as exc:
            raise ModelError(f"model load failure: {exc}")

    def detect(self, image: np.ndarray) -> list:
        torch = self._torch
        h, w = image.shape[0], image.shape[1]
        rgb8 = np.clip(image * 255.0, 0.0, 255.0).astype(np.uint8)
        with torch.no_grad():
            inputs = self.processor(images=rgb8, return_tensors="pt")
            raw = self.detector(**inputs)
            hits = self.processor.post_process_object_detection(
                raw, threshold=self.confidence, target_sizes=[(h, w)]
            )[0]
        self.segmenter.set_image(rgb8)
        labels = self.detector.config.id2label
        out = []
        for score, label, box in zip(hits["scores"], hits["labels"], hits["boxes"]):
            x0, y0, x1, y1 = [float(v) for v in box]
            x0, y0 = max(0, int(np.floor(x0))), max(0, int(np.floor(y0)))
            x1, y1 = min(w, int(np.ceil(x1))), min(h, int(np.ceil(y1)))
            if x1 <= x0 or y1 <= y0:
                continue
            masks, _, _ = self.segmenter.predict(
                box=np.array([x0, y0, x1, y1]), multimask_output=False
            )
            out.append(
                Detection((x0, y0, x1, y1), float(score), masks[0].astype(bool),
                          labels[int(label)])
            )
        out.sort(key=lambda d: (d.box[0], d.box[1]))
        return out


def make_backend(name: str, confidence: float = CONFIDENCE, contrast: float = CONTRAST,
                 min_area: int = MIN_AREA, segmenter_checkpoint=None):
    """Backend by name; "auto" prefers neural and falls back."""
    if name == "classical":
        return ClassicalBackend(confidence, contrast, min_area)
    if name == "neural":
        return NeuralBackend(confidence, segmenter_checkpoint=segmenter_checkpoint)
    if name == "auto":
        try:
            return NeuralBackend(confidence, segmenter_checkpoint=segmenter_checkpoint)
        except ModelError:
            return ClassicalBackend(confidence, contrast, min_area)
    raise ContractViolation(f"unknown backend: {name}")


__all__ = [
    "Detection",
    "ClassicalBackend",
    "NeuralBackend",
    "make_backend",
    "CONFIDENCE",
    "CONTRAST",
    "MIN_AREA",
]
