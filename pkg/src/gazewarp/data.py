"""Synthetic eye-pair dataset, crop extraction geometry, and pair mining.

The generator renders a procedural 2-D left eye: an elliptical opening in
skin, sclera, iris and pupil discs, and a small specular highlight whose
position follows the gaze. Per person it samples colors and eye geometry,
per sequence a head tilt (rotation of the whole eye), lighting gain and
framing jitter, and per frame the gaze angle, which moves the iris, the
eyelid aperture, and the highlight together. Rendering two gazes with the
same nuisance parameters yields exact ground-truth pairs.

Frames are quantized to 8-bit on creation so an in-memory dataset and its
PNG round trip are bit-identical.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

log = logging.getLogger(__name__)

CROP_H = 41
CROP_W = 51
BOX_WIDTH_RATIO = 1.0   # box width  = 1.0 R
BOX_HEIGHT_RATIO = 0.8  # box height = 0.8 R
NUM_ANCHORS = 7
PUPIL_IDX = 6
# canonical eyelid-edge order: [left corner, upper-left, upper-right,
# right corner, lower-right, lower-left]; horizontal mirroring swaps within
# each pair
_MIRROR_PERM = np.array([3, 2, 1, 0, 5, 4, 6])

MAX_CORRECTION_DEG = 30.0


class DegenerateAnchors(ValueError):
    """Anchor configuration with zero corner distance; the sample is rejected."""


@dataclass(frozen=True)
class AngleSpec:
    """Gaze or correction angle in degrees; positive vertical looks up."""

    vertical: float
    horizontal: float = 0.0


@dataclass
class EyeSample:
    """One cropped eye with its metadata."""

    image: np.ndarray        # (3, 41, 51) float32 in [0, 1]
    anchors: np.ndarray      # (7, 2) crop coordinates (x, y)
    gaze: AngleSpec
    head_tilt: float
    sequence_id: int
    person_id: int


@dataclass
class TrainingPair:
    """An input sample plus its redirection target cut with the same box."""

    input: EyeSample
    target_image: np.ndarray      # (3, 41, 51) exact crop
    target_image_big: np.ndarray  # (3, 41+2k, 51+2k) enlarged crop
    correction: AngleSpec


# ---------------------------------------------------------------------------
# crop geometry


def corner_distance(anchors: np.ndarray) -> float:
    """Characteristic radius R: distance between the two most horizontally
    distant eyelid-edge points (the eye corners)."""
    edge = np.asarray(anchors, dtype=np.float64)[:PUPIL_IDX]
    xs = edge[:, 0]
    i, j = int(np.argmin(xs)), int(np.argmax(xs))
    return float(np.hypot(*(edge[i] - edge[j])))


def crop_box(anchors: np.ndarray) -> tuple[float, float, float, float]:
    """Bounding box (x0, y0, width, height) in source pixels.

    The tight box of all anchors fixes the center; the extents come from
    the corner distance R as 1.0R x 0.8R.
    """
    a = np.asarray(anchors, dtype=np.float64)
    r = corner_distance(a)
    if r < 1e-6:
        raise DegenerateAnchors("eye corner distance is zero")
    cx = 0.5 * (a[:, 0].min() + a[:, 0].max())
    cy = 0.5 * (a[:, 1].min() + a[:, 1].max())
    bw = BOX_WIDTH_RATIO * r
    bh = BOX_HEIGHT_RATIO * r
    return cx - bw / 2.0, cy - bh / 2.0, bw, bh


def _bilinear_at(image: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) float image at real positions, clamped to borders."""
    C, H, W = image.shape
    cx = np.clip(sx, 0, W - 1)
    cy = np.clip(sy, 0, H - 1)
    x0 = np.floor(cx).astype(np.intp)
    y0 = np.floor(cy).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (cx - x0).astype(image.dtype)
    wy = (cy - y0).astype(image.dtype)
    top = (1 - wx) * image[:, y0, x0] + wx * image[:, y0, x1]
    bot = (1 - wx) * image[:, y1, x0] + wx * image[:, y1, x1]
    return (1 - wy) * top + wy * bot


def _grid_source_coords(box, out_hw: tuple[int, int], margin: int):
    # half-pixel centers: output column j reads source x0 + (j - margin + 0.5) * bw/51 - 0.5
    x0, y0, bw, bh = box
    h, w = out_hw
    xs = x0 + ((np.arange(w, dtype=np.float64) - margin) + 0.5) * (bw / CROP_W) - 0.5
    ys = y0 + ((np.arange(h, dtype=np.float64) - margin) + 0.5) * (bh / CROP_H) - 0.5
    return np.meshgrid(xs, ys)  # (h, w) each


def resample_box(image: np.ndarray, box, margin: int = 0) -> np.ndarray:
    """Cut ``box`` from a (3, H, W) float image and rescale to the crop size,
    optionally enlarged by ``margin`` output pixels on every side."""
    out_hw = (CROP_H + 2 * margin, CROP_W + 2 * margin)
    gx, gy = _grid_source_coords(box, out_hw, margin)
    return _bilinear_at(image, gx, gy).astype(np.float32)


def map_anchors_to_crop(anchors: np.ndarray, box) -> np.ndarray:
    """Anchor coordinates mapped through the same box-to-crop transform."""
    x0, y0, bw, bh = box
    a = np.asarray(anchors, dtype=np.float64)
    out = np.empty_like(a)
    out[:, 0] = (a[:, 0] - x0 + 0.5) * (CROP_W / bw) - 0.5
    out[:, 1] = (a[:, 1] - y0 + 0.5) * (CROP_H / bh) - 0.5
    return out.astype(np.float32)


def extract_crop(image: np.ndarray, anchors: np.ndarray):
    """Crop one eye: returns (crop, anchors_crop, box).

    ``image`` is (3, H, W) float in [0, 1]. The returned box can be reused
    to cut the target image of a pair at identical coordinates.
    """
    box = crop_box(anchors)
    crop = resample_box(image, box)
    return crop, map_anchors_to_crop(anchors, box), box


def mirror(sample: EyeSample) -> EyeSample:
    """Horizontal reflection: flips the image and anchor x coordinates,
    restores the canonical edge-point order, and negates the horizontal
    gaze component and the tilt. An involution."""
    img = sample.image[:, :, ::-1].copy()
    w = sample.image.shape[2]
    a = sample.anchors.copy()
    a[:, 0] = (w - 1) - a[:, 0]
    a = a[_MIRROR_PERM]
    return EyeSample(
        image=img,
        anchors=a,
        gaze=AngleSpec(sample.gaze.vertical, -sample.gaze.horizontal),
        head_tilt=-sample.head_tilt,
        sequence_id=sample.sequence_id,
        person_id=sample.person_id,
    )


def mirror_flow(flow: np.ndarray) -> np.ndarray:
    """Map a flow predicted on a mirrored crop back to the original frame:
    flip columns and negate the horizontal channel."""
    out = flow[..., ::-1].copy()
    out[..., 0, :, :] *= -1.0
    return out


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class _Person:
    skin: np.ndarray
    sclera: np.ndarray
    iris: np.ndarray
    pupil: np.ndarray
    half_width: float       # a, px
    aspect: float           # open half-height / half-width at neutral gaze
    iris_r: float
    pupil_r: float
    highlight_r: float
    iris_dx: float          # horizontal iris travel at 30 degrees
    iris_dy: float          # vertical iris travel at 30 degrees
    aperture_gain: float    # relative lid opening change at 30 degrees


@dataclass
class _Sequence:
    tilt: float
    gain: float
    center: np.ndarray      # (x, y)
    highlight_off: np.ndarray


def _person_params(seed: int, person: int) -> _Person:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, person, 0])))
    a = rng.uniform(17.0, 22.0)
    aspect = rng.uniform(0.44, 0.56)
    iris_r = a * rng.uniform(0.40, 0.50)
    return _Person(
        skin=np.array([0.72, 0.58, 0.48]) + rng.uniform(-0.08, 0.08, 3),
        sclera=np.array([0.93, 0.93, 0.91]) + rng.uniform(-0.035, 0.02, 3),
        iris=np.array([rng.uniform(0.10, 0.45), rng.uniform(0.15, 0.50), rng.uniform(0.15, 0.62)]),
        pupil=np.full(3, rng.uniform(0.02, 0.08)),
        half_width=a,
        aspect=aspect,
        iris_r=iris_r,
        pupil_r=iris_r * rng.uniform(0.38, 0.50),
        highlight_r=rng.uniform(1.3, 2.0),
        iris_dx=a * rng.uniform(0.40, 0.50),
        iris_dy=a * aspect * rng.uniform(0.50, 0.62),
        aperture_gain=rng.uniform(0.16, 0.26),
    )


def _sequence_params(seed: int, person: int, seq: int, frame_hw: tuple[int, int]) -> _Sequence:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, person, seq, 1])))
    hard = rng.uniform() < 0.35
    if hard:
        tilt = float(rng.choice([-1.0, 1.0]) * rng.uniform(8.5, 14.0))
    else:
        tilt = float(rng.uniform(-6.0, 6.0))
    h, w = frame_hw
    return _Sequence(
        tilt=tilt,
        gain=float(rng.uniform(0.90, 1.08)),
        center=np.array([w / 2.0, h / 2.0]) + rng.uniform(-2.5, 2.5, 2),
        highlight_off=np.array([rng.uniform(-0.38, -0.15), rng.uniform(-0.50, -0.25)]),
    )


def _smooth_disc(signed_dist_px: np.ndarray, edge: float = 0.9) -> np.ndarray:
    """Antialiased inside mask from a signed distance map (positive inside)."""
    t = np.clip(signed_dist_px / edge * 0.5 + 0.5, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def render_frame(person: _Person, seq: _Sequence, gaze: AngleSpec,
                 frame_hw: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Render one frame; returns (uint8 image (3, H, W), anchors (7, 2))."""
    h, w = frame_hw
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    tau = np.deg2rad(seq.tilt)
    ct, st = np.cos(tau), np.sin(tau)
    dx = xs - seq.center[0]
    dy = ys - seq.center[1]
    xi = ct * dx + st * dy
    eta = -st * dx + ct * dy

    a = person.half_width
    b0 = a * person.aspect
    v, hg = gaze.vertical, gaze.horizontal
    b = b0 * np.clip(1.0 + person.aperture_gain * v / 30.0, 0.5, 1.4)

    # eyelid opening
    r_open = np.sqrt((xi / a) ** 2 + (eta / b) ** 2)
    m_open = _smooth_disc((1.0 - r_open) * min(a, b))

    # iris and pupil move with the gaze; up is -eta
    ic = np.array([person.iris_dx * hg / 30.0, -person.iris_dy * v / 30.0])
    d_iris = np.sqrt((xi - ic[0]) ** 2 + (eta - ic[1]) ** 2)
    m_iris = _smooth_disc(person.iris_r - d_iris)
    m_pupil = _smooth_disc(person.pupil_r - d_iris)

    hc = ic * 0.45 + seq.highlight_off * np.array([a, b0])
    d_high = np.sqrt((xi - hc[0]) ** 2 + (eta - hc[1]) ** 2)
    m_high = _smooth_disc(person.highlight_r - d_high) * m_open

    inner = (person.sclera[:, None, None] * (1.0 - m_iris)
             + m_iris * (person.iris[:, None, None] * (1.0 - m_pupil)
                         + m_pupil * person.pupil[:, None, None]))
    img = person.skin[:, None, None] * (1.0 - m_open) + m_open * inner
    img = img * (1.0 - m_high) + m_high  # specular highlight blends to white
    img = np.clip(img * seq.gain, 0.0, 1.0)
    img_u8 = np.round(img * 255.0).astype(np.uint8)

    # anchors on the eyelid-edge ellipse plus the pupil center
    s3 = np.sqrt(3.0) / 2.0
    pts = np.array([
        [-a, 0.0],
        [-a / 2.0, -b * s3],
        [a / 2.0, -b * s3],
        [a, 0.0],
        [a / 2.0, b * s3],
        [-a / 2.0, b * s3],
        ic,
    ])
    rot = np.array([[ct, -st], [st, ct]])
    anchors = pts @ rot.T + seq.center
    return img_u8, anchors.astype(np.float32)


class Dataset:
    """Frames grouped by person and sequence, stored as uint8 arrays."""

    def __init__(self, images: np.ndarray, anchors: np.ndarray, gaze: np.ndarray,
                 tilt: np.ndarray, person: np.ndarray, sequence: np.ndarray):
        self.images = images          # (N, 3, Hf, Wf) uint8
        self.anchors = anchors        # (N, 7, 2) float32
        self.gaze = gaze              # (N, 2) float32, columns (v, h)
        self.tilt = tilt              # (N,) float32
        self.person = person          # (N,) int32
        self.sequence = sequence      # (N,) int32, globally unique
        if not (len(images) == len(anchors) == len(gaze) == len(tilt) == len(person) == len(sequence)):
            raise ValueError("dataset arrays disagree on length")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def persons(self) -> np.ndarray:
        return np.unique(self.person)

    def image_float(self, i: int) -> np.ndarray:
        return self.images[i].astype(np.float32) / 255.0

    def sample(self, i: int) -> EyeSample:
        crop, anchors_crop, _ = extract_crop(self.image_float(i), self.anchors[i])
        return EyeSample(
            image=crop,
            anchors=anchors_crop,
            gaze=AngleSpec(float(self.gaze[i, 0]), float(self.gaze[i, 1])),
            head_tilt=float(self.tilt[i]),
            sequence_id=int(self.sequence[i]),
            person_id=int(self.person[i]),
        )

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.images[idx], self.anchors[idx], self.gaze[idx],
                       self.tilt[idx], self.person[idx], self.sequence[idx])

    def split_by_person(self, test_persons: Iterable[int]) -> tuple["Dataset", "Dataset"]:
        """Person-disjoint split: (train, test). Never splits by frame."""
        test_set = set(int(p) for p in test_persons)
        mask = np.array([int(p) in test_set for p in self.person])
        return self.subset(~mask), self.subset(mask)

    # -- disk layout: person_P/seq_S/frame_F.png + meta.jsonl per sequence --

    def save(self, root) -> None:
        from PIL import Image

        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for sid in np.unique(self.sequence):
            idx = np.nonzero(self.sequence == sid)[0]
            pid = int(self.person[idx[0]])
            seq_dir = root / f"person_{pid:03d}" / f"seq_{int(sid):04d}"
            seq_dir.mkdir(parents=True, exist_ok=True)
            lines = []
            for frame, i in enumerate(idx):
                Image.fromarray(self.images[i].transpose(1, 2, 0)).save(seq_dir / f"frame_{frame:04d}.png")
                lines.append(json.dumps({
                    "frame": frame,
                    "anchors": self.anchors[i].round(4).tolist(),
                    "gaze": {"v": float(self.gaze[i, 0]), "h": float(self.gaze[i, 1])},
                    "tilt": float(self.tilt[i]),
                }))
            (seq_dir / "meta.jsonl").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, root) -> "Dataset":
        from PIL import Image

        root = Path(root)
        images, anchors, gaze, tilt, person, sequence = [], [], [], [], [], []
        for person_dir in sorted(root.glob("person_*")):
            pid = int(person_dir.name.split("_")[1])
            for seq_dir in sorted(person_dir.glob("seq_*")):
                sid = int(seq_dir.name.split("_")[1])
                meta = [json.loads(line) for line in (seq_dir / "meta.jsonl").read_text().splitlines() if line]
                for rec in meta:
                    img = np.asarray(Image.open(seq_dir / f"frame_{rec['frame']:04d}.png"), dtype=np.uint8)
                    images.append(img.transpose(2, 0, 1))
                    anchors.append(np.asarray(rec["anchors"], dtype=np.float32))
                    gaze.append([rec["gaze"]["v"], rec["gaze"]["h"]])
                    tilt.append(rec["tilt"])
                    person.append(pid)
                    sequence.append(sid)
        if not images:
            raise FileNotFoundError(f"no dataset found under {root}")
        return cls(np.stack(images), np.stack(anchors).astype(np.float32),
                   np.asarray(gaze, dtype=np.float32), np.asarray(tilt, dtype=np.float32),
                   np.asarray(person, dtype=np.int32), np.asarray(sequence, dtype=np.int32))


def synth_generate(seed: int, n_persons: int, n_sequences: int, n_frames: int = 40,
                   v_range: tuple[float, float] = (-25.0, 25.0),
                   h_range: tuple[float, float] = (0.0, 0.0),
                   frame_hw: tuple[int, int] = (72, 96)) -> Dataset:
    """Deterministic procedural dataset: same seed, same bytes."""
    images, anchors, gaze, tilt, person, sequence = [], [], [], [], [], []
    sid = 0
    for pid in range(n_persons):
        pp = _person_params(seed, pid)
        for s in range(n_sequences):
            sp = _sequence_params(seed, pid, s, frame_hw)
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, pid, s, 2])))
            t = np.linspace(0.0, 1.0, n_frames)
            v = v_range[0] + (v_range[1] - v_range[0]) * t
            hgz = h_range[0] + (h_range[1] - h_range[0]) * rng.permutation(t)
            v = np.clip(v + rng.uniform(-0.8, 0.8, n_frames), v_range[0], v_range[1])
            if h_range[1] > h_range[0]:
                hgz = np.clip(hgz + rng.uniform(-0.8, 0.8, n_frames), h_range[0], h_range[1])
            for f in range(n_frames):
                img, anc = render_frame(pp, sp, AngleSpec(float(v[f]), float(hgz[f])), frame_hw)
                images.append(img)
                anchors.append(anc)
                gaze.append([v[f], hgz[f]])
                tilt.append(sp.tilt)
                person.append(pid)
                sequence.append(sid)
            sid += 1
    return Dataset(np.stack(images), np.stack(anchors).astype(np.float32),
                   np.asarray(gaze, dtype=np.float32), np.asarray(tilt, dtype=np.float32),
                   np.asarray(person, dtype=np.int32), np.asarray(sequence, dtype=np.int32))


# ---------------------------------------------------------------------------
# pair mining


class PairSet:
    """Mined ordered training pairs, stored as parallel arrays."""

    def __init__(self, input_idx, target_idx, correction, tilt):
        self.input_idx = np.asarray(input_idx, dtype=np.int64)
        self.target_idx = np.asarray(target_idx, dtype=np.int64)
        self.correction = np.asarray(correction, dtype=np.float32)  # (P, 2)
        self.tilt = np.asarray(tilt, dtype=np.float32)

    def __len__(self) -> int:
        return len(self.input_idx)

    def subset(self, idx) -> "PairSet":
        return PairSet(self.input_idx[idx], self.target_idx[idx], self.correction[idx], self.tilt[idx])


def mine_pairs(ds: Dataset, max_correction: float = MAX_CORRECTION_DEG) -> PairSet:
    """All ordered within-sequence pairs whose correction stays in range.

    A pair is (input frame i, target frame j), i != j, correction = target
    gaze minus input gaze, |correction| <= 30 degrees per axis. The input
    frame's tilt rides along for easy/hard stratification.
    """
    ins, tgts = [], []
    for sid in np.unique(ds.sequence):
        idx = np.nonzero(ds.sequence == sid)[0]
        ii, jj = np.meshgrid(idx, idx, indexing="ij")
        keep = ii != jj
        ins.append(ii[keep])
        tgts.append(jj[keep])
    input_idx = np.concatenate(ins)
    target_idx = np.concatenate(tgts)
    corr = ds.gaze[target_idx] - ds.gaze[input_idx]
    ok = np.all(np.abs(corr) <= max_correction, axis=1)
    return PairSet(input_idx[ok], target_idx[ok], corr[ok], ds.tilt[input_idx[ok]])


def materialize_pair(ds: Dataset, pairs: PairSet, p: int, margin: int = 3) -> TrainingPair:
    """Build one TrainingPair; the target is cut with the input's box."""
    i = int(pairs.input_idx[p])
    j = int(pairs.target_idx[p])
    img_in = ds.image_float(i)
    box = crop_box(ds.anchors[i])
    img_tgt = ds.image_float(j)
    sample = EyeSample(
        image=resample_box(img_in, box),
        anchors=map_anchors_to_crop(ds.anchors[i], box),
        gaze=AngleSpec(float(ds.gaze[i, 0]), float(ds.gaze[i, 1])),
        head_tilt=float(ds.tilt[i]),
        sequence_id=int(ds.sequence[i]),
        person_id=int(ds.person[i]),
    )
    return TrainingPair(
        input=sample,
        target_image=resample_box(img_tgt, box),
        target_image_big=resample_box(img_tgt, box, margin=margin),
        correction=AngleSpec(*(ds.gaze[j] - ds.gaze[i])),
    )


def batch_tensors(ds: Dataset, pairs: PairSet, ids: np.ndarray, margin: int = 3,
                  angle_dims: int = 1) -> dict:
    """Materialize a batch for training or evaluation.

    Returns float32 arrays: input (B,3,41,51), anchors (B,7,2), correction
    (B,angle_dims), target (B,3,41,51), target_big (B,3,41+2m,51+2m).
    """
    ids = np.asarray(ids)
    B = len(ids)
    inp = np.empty((B, 3, CROP_H, CROP_W), dtype=np.float32)
    tgt = np.empty((B, 3, CROP_H, CROP_W), dtype=np.float32)
    big = np.empty((B, 3, CROP_H + 2 * margin, CROP_W + 2 * margin), dtype=np.float32)
    anc = np.empty((B, NUM_ANCHORS, 2), dtype=np.float32)
    for n, p in enumerate(ids):
        i = int(pairs.input_idx[p])
        j = int(pairs.target_idx[p])
        box = crop_box(ds.anchors[i])
        img_in = ds.image_float(i)
        img_tg = ds.image_float(j)
        inp[n] = resample_box(img_in, box)
        tgt[n] = resample_box(img_tg, box)
        big[n] = resample_box(img_tg, box, margin=margin)
        anc[n] = map_anchors_to_crop(ds.anchors[i], box)
    corr = pairs.correction[ids][:, :angle_dims].astype(np.float32)
    return {"input": inp, "anchors": anc, "correction": corr, "target": tgt, "target_big": big}


# ---------------------------------------------------------------------------
# analytic warp oracle: a learnability floor that needs no training.
# The flow translates a smooth disc around the target pupil position by the
# input-to-target pupil offset and is zero elsewhere. This crude warp
# already recovers most of the redirection, so its normalized error is a
# floor that any trained model should beat.


def analytic_warp_output(input_image: np.ndarray, pupil_in: np.ndarray, pupil_tgt: np.ndarray,
                         radius: float) -> np.ndarray:
    """Translate a disc around ``pupil_tgt`` so it reads from ``pupil_in``."""
    C, H, W = input_image.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    d = np.hypot(xs - pupil_tgt[0], ys - pupil_tgt[1])
    t = np.clip((radius - d) / (0.35 * radius) * 0.5 + 0.5, 0.0, 1.0)
    wgt = t * t * (3.0 - 2.0 * t)
    off = pupil_in - pupil_tgt
    return _bilinear_at(input_image, xs + wgt * off[0], ys + wgt * off[1]).astype(np.float32)


def analytic_oracle_nmse(ds: Dataset, pairs: PairSet, p: int, margin: int = 3) -> float:
    """Normalized MSE of the analytic warp for one pair."""
    i = int(pairs.input_idx[p])
    j = int(pairs.target_idx[p])
    box = crop_box(ds.anchors[i])
    inp = resample_box(ds.image_float(i), box)
    tgt = resample_box(ds.image_float(j), box)
    pupil_in = map_anchors_to_crop(ds.anchors[i], box)[PUPIL_IDX].astype(np.float64)
    pupil_tgt = map_anchors_to_crop(ds.anchors[j], box)[PUPIL_IDX].astype(np.float64)
    radius = 0.33 * corner_distance(map_anchors_to_crop(ds.anchors[i], box))
    out = analytic_warp_output(inp, pupil_in, pupil_tgt, radius)
    mse_in = float(np.mean((inp - tgt) ** 2))
    if mse_in <= 0:
        return 0.0
    return float(np.mean((out - tgt) ** 2)) / mse_in
