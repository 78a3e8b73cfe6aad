"""Object mask generation over an image sequence.

Detections become persistent object identities by greedy IoU linking
between consecutive frames: every (track, detection) pair with box IoU
at or above the threshold is considered best-first, leftovers start new
tracks, and a track that misses a frame is closed for linking (an
object that disappears and returns gets a new id; identity here is
approximate by design). The emitted layout is the downstream mask
contract: <out>/<object_id>/<frame:05d>.png bitmaps plus an
objects.json sidecar mapping ids to categories, where sidecar keys and
object directories must agree exactly. The sidecar is written after
every bitmap, so an interrupted run leaves no directory the sidecar
does not vouch for. A frame with no detections simply has no files.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

from .detect import CONFIDENCE, CONTRAST, MIN_AREA, make_backend
from .errors import ContractViolation
from .images import list_frames, read_image, write_bytes, write_mask

LINK_IOU = 0.3
OBJECTS_SIDECAR = "objects.json"
REPORT_FILE = "gen_masks.json"


def box_iou(a, b) -> float:
    """IoU of two half-open (x0,y0,x1,y1) boxes."""
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    if ix1 <= ix0 or iy1 <= iy0:
        return 0.0
    inter = (ix1 - ix0) * (iy1 - iy0)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / float(area_a + area_b - inter)


@dataclass
class Track:
    object_id: str
    category: str
    last_box: tuple
    last_frame: int
    frames: list = field(default_factory=list)


def link_frames(per_frame_detections, link_iou: float = LINK_IOU):
    """[(frame, [Detection])] -> (tracks, {object_id: {frame: mask}})."""
    if not (0.0 < link_iou <= 1.0):
        raise ContractViolation(f"link IoU must be in (0, 1], got {link_iou}")
    tracks = []
    masks = {}
    for frame, detections in per_frame_detections:
        alive = [t for t in tracks if t.last_frame == frame - 1]
        pairs = []
        for ti, track in enumerate(alive):
            for di, det in enumerate(detections):
                iou = box_iou(track.last_box, det.box)
                if iou >= link_iou:
                    pairs.append((iou, ti, di))
        pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
        taken_tracks, taken_dets = set(), set()
        assigned = {}
        for iou, ti, di in pairs:
            if ti in taken_tracks or di in taken_dets:
                continue
            taken_tracks.add(ti)
            taken_dets.add(di)
            assigned[di] = alive[ti]
        for di, det in enumerate(detections):
            track = assigned.get(di)
            if track is None:
                track = Track(f"obj_{len(tracks):03d}", det.category, det.box, frame)
                tracks.append(track)
                masks[track.object_id] = {}
            track.last_box = det.box
            track.last_frame = frame
            track.frames.append(frame)
            masks[track.object_id][frame] = det.mask
    return tracks, masks


def gen_masks(
    images_dir,
    out_dir,
    backend: str = "classical",
    confidence: float = CONFIDENCE,
    contrast: float = CONTRAST,
    min_area: int = MIN_AREA,
    link_iou: float = LINK_IOU,
    segmenter_checkpoint=None,
) -> dict:
    """Detect, link, and write the mask layout; returns the run report.

    The output directory must be empty or absent: the sidecar vouches
    for exactly the directories present, so stale ids from an earlier
    run would poison the layout.
    """
    frames = list_frames(images_dir)
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise ContractViolation(f"output directory is not empty: {out_dir}")
    det = make_backend(backend, confidence, contrast, min_area, segmenter_checkpoint)

    per_frame = []
    for index, path in enumerate(frames):
        per_frame.append((index, det.detect(read_image(path))))
    tracks, masks = link_frames(per_frame, link_iou)

    out_dir.mkdir(parents=True, exist_ok=True)
    for track in tracks:
        d = out_dir / track.object_id
        d.mkdir()
        for frame, mask in sorted(masks[track.object_id].items()):
            write_mask(d / f"{frame:05d}.png", mask)
    sidecar = {t.object_id: t.category for t in tracks}
    write_bytes(out_dir / OBJECTS_SIDECAR, json.dumps(sidecar, indent=2, sort_keys=True).encode())

    report = {
        "backend": det.name,
        "confidence": confidence,
        "link_iou": link_iou,
        "frames": len(frames),
        "detections": [len(dets) for _, dets in per_frame],
        "objects": {
            t.object_id: {"category": t.category, "frames": t.frames} for t in tracks
        },
    }
    write_bytes(out_dir / REPORT_FILE, json.dumps(report, indent=2, sort_keys=True).encode())
    return report


__all__ = ["box_iou", "Track", "link_frames", "gen_masks", "LINK_IOU", "OBJECTS_SIDECAR", "REPORT_FILE"]
