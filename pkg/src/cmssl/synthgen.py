"""Procedural labeled videos with independent context and motion classes.

Context class picks the static background texture family (gradient, stripes,
checkerboard, blob palette); motion class picks the trajectory pattern of two
moving sprites (drift, orbit, zigzag, sway). Colors, speeds, phases and start
positions are per-seed jitter, so class identity never leaks through raw
color statistics. Identical SceneSpec -> byte-identical video.

A reserved motion class STATIC_MOTION (-1) freezes the sprites; it exists for
codec tests and never appears in generated datasets.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import CodecConfig, RawVideo, encode_video, pad_frames_to_block, write_cmv1

CONTEXT_FAMILIES = ("gradient", "stripes", "checker", "blobs")
MOTION_FAMILIES = ("drift", "orbit", "zigzag", "sway")
STATIC_MOTION = -1


@dataclass
class SceneSpec:
    context_class: int
    motion_class: int
    seed: int
    frames: int = 36
    height: int = 64
    width: int = 64


@dataclass
class LabeledVideo:
    video: RawVideo
    context_class: int
    motion_class: int
    split: str = "unassigned"
    seed: int = 0
    padded_from: tuple | None = None


def _round_px(v: float) -> int:
    return int(np.floor(v + 0.5))


def _pick_colors(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(20, 236, size=(n, 3)).astype(np.float64)


def _render_background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    family = CONTEXT_FAMILIES[spec.context_class % len(CONTEXT_FAMILIES)]
    if family == "gradient":
        c0, c1 = _pick_colors(rng, 2)
        theta = rng.uniform(0, 2 * np.pi)
        proj = xx * np.cos(theta) + yy * np.sin(theta)
        t = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
        bg = c0[None, None] + t[:, :, None] * (c1 - c0)[None, None]
    elif family == "stripes":
        c0, c1 = _pick_colors(rng, 2)
        theta = rng.choice([0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4])
        width = rng.integers(4, 11)
        phase = rng.uniform(0, width)
        proj = xx * np.cos(theta) + yy * np.sin(theta) + phase
        band = (np.floor(proj / width) % 2).astype(int)
        bg = np.where(band[:, :, None] == 0, c0[None, None], c1[None, None])
    elif family == "checker":
        c0, c1 = _pick_colors(rng, 2)
        cell = rng.integers(6, 13)
        oy, ox = rng.integers(0, cell, size=2)
        band = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(int)
        bg = np.where(band[:, :, None] == 0, c0[None, None], c1[None, None])
    elif family == "blobs":
        palette = _pick_colors(rng, 3)
        coarse = rng.integers(0, 3, size=(max(h // 8, 1), max(w // 8, 1)))
        idx = coarse[np.minimum(yy.astype(int) // 8, coarse.shape[0] - 1),
                     np.minimum(xx.astype(int) // 8, coarse.shape[1] - 1)]
        bg = palette[idx]
    else:  # pragma: no cover
        raise ValueError(f"unknown context family {family}")
    return bg


def _sprite_color(rng: np.random.Generator, bg_mean: np.ndarray) -> np.ndarray:
    # keep the sprite visible: resample until far enough from the mean background
    for _ in range(50):
        c = rng.integers(0, 256, size=3).astype(np.float64)
        if np.abs(c - bg_mean).sum() > 120:
            return c
    return 255.0 - bg_mean


class _Sprite:
    """One moving solid shape; position(t) is pure in t given drawn params."""

    def __init__(self, spec: SceneSpec, rng: np.random.Generator, bg_mean: np.ndarray):
        h, w = spec.height, spec.width
        self.radius = int(rng.integers(6, 10))
        self.shape = rng.choice(["disc", "square"])
        self.color = _sprite_color(rng, bg_mean)
        m = self.radius + 1
        self.cx0 = rng.uniform(m, w - m)
        self.cy0 = rng.uniform(m, h - m)
        self.h, self.w = h, w
        family = (
            "static"
            if spec.motion_class == STATIC_MOTION
            else MOTION_FAMILIES[spec.motion_class % len(MOTION_FAMILIES)]
        )
        self.family = family
        if family == "drift":
            theta = rng.uniform(0, 2 * np.pi)
            speed = rng.uniform(1.2, 2.2)
            self.vx, self.vy = speed * np.cos(theta), speed * np.sin(theta)
        elif family == "orbit":
            self.r_orbit = rng.uniform(9, 16)
            self.omega = rng.choice([-1.0, 1.0]) * rng.uniform(0.28, 0.45)
            self.phase = rng.uniform(0, 2 * np.pi)
            self.ox = np.clip(self.cx0, self.r_orbit + m, w - self.r_orbit - m)
            self.oy = np.clip(self.cy0, self.r_orbit + m, h - self.r_orbit - m)
        elif family == "zigzag":
            self.speed = rng.uniform(1.5, 2.5)
            self.period = int(rng.integers(5, 9))
            self.vy_drift = rng.uniform(-0.5, 0.5)
        elif family == "sway":
            self.amp = rng.uniform(8, 15)
            self.omega = rng.uniform(0.35, 0.6)
            self.phase = rng.uniform(0, 2 * np.pi)
            self.vx_drift = rng.uniform(-0.5, 0.5)
            self.oy = np.clip(self.cy0, self.amp + m, h - self.amp - m)

    def _reflect(self, p: float, lo: float, hi: float) -> float:
        # fold an unbounded coordinate into [lo, hi] by mirror reflection
        span = hi - lo
        if span <= 0:
            return lo
        q = (p - lo) % (2 * span)
        return lo + (q if q <= span else 2 * span - q)

    def center_at(self, t: int) -> tuple[int, int]:
        m = self.radius + 1
        if self.family == "static":
            cx, cy = self.cx0, self.cy0
        elif self.family == "drift":
            cx = self._reflect(self.cx0 + self.vx * t, m, self.w - m)
            cy = self._reflect(self.cy0 + self.vy * t, m, self.h - m)
        elif self.family == "orbit":
            ang = self.phase + self.omega * t
            cx = self.ox + self.r_orbit * np.cos(ang)
            cy = self.oy + self.r_orbit * np.sin(ang)
        elif self.family == "zigzag":
            # triangle wave along x, slow drift along y
            cyc = 2 * self.period
            ph = t % cyc
            leg = ph if ph < self.period else cyc - ph
            cx = self._reflect(self.cx0 + self.speed * (leg - self.period / 2), m, self.w - m)
            cy = self._reflect(self.cy0 + self.vy_drift * t, m, self.h - m)
        elif self.family == "sway":
            cx = self._reflect(self.cx0 + self.vx_drift * t, m, self.w - m)
            cy = self.oy + self.amp * np.sin(self.phase + self.omega * t)
        else:  # pragma: no cover
            raise ValueError(self.family)
        return _round_px(cx), _round_px(cy)

    def paint(self, frame: np.ndarray, t: int):
        cx, cy = self.center_at(t)
        r = self.radius
        yy, xx = np.mgrid[0 : frame.shape[0], 0 : frame.shape[1]]
        if self.shape == "disc":
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        else:
            mask = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
        frame[mask] = self.color


def generate_video(spec: SceneSpec, codec_block_size: int = 8) -> LabeledVideo:
    """Render one labeled video; pads to the codec block grid if needed."""
    if spec.motion_class != STATIC_MOTION and spec.motion_class < 0:
        raise ValueError(f"motion_class {spec.motion_class} out of range")
    if spec.context_class < 0:
        raise ValueError(f"context_class {spec.context_class} out of range")
    rng = np.random.default_rng(np.random.PCG64(spec.seed))
    bg = _render_background(spec, rng)
    sprites = [_Sprite(spec, rng, bg.mean(axis=(0, 1))) for _ in range(2)]
    frames = np.empty((spec.frames, spec.height, spec.width, 3), dtype=np.uint8)
    for t in range(spec.frames):
        frame = bg.copy()
        for s in sprites:
            s.paint(frame, t)
        frames[t] = np.clip(frame, 0, 255).astype(np.uint8)
    padded, orig = pad_frames_to_block(frames, codec_block_size)
    return LabeledVideo(
        video=RawVideo(frames=padded),
        context_class=spec.context_class,
        motion_class=spec.motion_class,
        seed=spec.seed,
        padded_from=None if padded.shape[1:3] == (spec.height, spec.width) else orig,
    )


def video_seed(dataset_seed: int, index: int) -> int:
    """Stable per-video seed derived from the dataset seed."""
    ss = np.random.SeedSequence(entropy=(int(dataset_seed), int(index)))
    return int(ss.generate_state(1)[0])


def generate_dataset(
    out_dir,
    n_videos: int = 48,
    k_context: int = 4,
    k_motion: int = 4,
    frames: int = 36,
    resolution: tuple[int, int] = (64, 64),
    seed: int = 0,
    split_fraction: float = 2 / 3,
    codec: CodecConfig | None = None,
    threads: int = 1,
) -> Path:
    """Write a class-balanced CMV1 dataset plus a JSONL manifest.

    Videos cycle through the (context, motion) grid, so every pair appears
    n // (Kc*Km) or one more times. Within each pair the first
    floor(count * split_fraction + 0.5) videos (by index) go to train, the
    rest to test.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    codec = codec or CodecConfig()
    if n_videos < k_context * k_motion:
        warnings.warn(
            f"n_videos={n_videos} below one per (context, motion) pair ({k_context * k_motion})"
        )

    entries = []
    for i in range(n_videos):
        pair = i % (k_context * k_motion)
        entries.append(
            {
                "index": i,
                "context_class": pair // k_motion,
                "motion_class": pair % k_motion,
                "seed": video_seed(seed, i),
            }
        )

    # stratified split per (context, motion) pair, rounding half up
    by_pair: dict[tuple[int, int], list[dict]] = {}
    for e in entries:
        by_pair.setdefault((e["context_class"], e["motion_class"]), []).append(e)
    for members in by_pair.values():
        n_train = int(np.floor(len(members) * split_fraction + 0.5))
        for j, e in enumerate(members):
            e["split"] = "train" if j < n_train else "test"

    def build_one(e):
        spec = SceneSpec(
            context_class=e["context_class"],
            motion_class=e["motion_class"],
            seed=e["seed"],
            frames=frames,
            height=resolution[0],
            width=resolution[1],
        )
        lv = generate_video(spec, codec_block_size=codec.block_size)
        path = out_dir / f"video_{e['index']:05d}.cmv1"
        write_cmv1(encode_video(lv.video, codec), path)
        return {
            "path": path.name,
            "context_class": e["context_class"],
            "motion_class": e["motion_class"],
            "split": e["split"],
            "seed": e["seed"],
            "frames": int(lv.video.n_frames),
            "H": int(lv.video.height),
            "W": int(lv.video.width),
        }

    if threads > 1 and entries:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as ex:
            records = list(ex.map(build_one, entries))
    else:
        records = [build_one(e) for e in entries]

    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    meta = {
        "n_videos": n_videos,
        "k_context": k_context,
        "k_motion": k_motion,
        "frames": frames,
        "resolution": list(resolution),
        "seed": seed,
        "split_fraction": split_fraction,
        "split_rounding": "per-pair train count = floor(count * split_fraction + 0.5)",
        "codec": {"block_size": codec.block_size, "search_range": codec.search_range, "gop_size": codec.gop_size},
    }
    with open(out_dir / "dataset.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return manifest


def load_manifest(dataset_dir) -> list[dict]:
    dataset_dir = Path(dataset_dir)
    records = []
    with open(dataset_dir / "manifest.jsonl") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def manifest_digest(dataset_dir) -> str:
    """Content hash over the manifest and every referenced CMV1 file."""
    dataset_dir = Path(dataset_dir)
    h = hashlib.sha256()
    h.update((dataset_dir / "manifest.jsonl").read_bytes())
    for rec in load_manifest(dataset_dir):
        h.update((dataset_dir / rec["path"]).read_bytes())
    return h.hexdigest()
