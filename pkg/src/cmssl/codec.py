"""Mini block-based video codec: I-frames plus motion-compensated P-frames.

Frames are (H, W, 3) uint8. Each group of pictures stores one full I-frame
followed by P-frames carrying a per-block motion-vector grid and a lossless
int16 residual, so decode(encode(v)) is bit-exact. Motion search is
exhaustive SAD over a +/- search_range window with a deterministic
tie-break, which keeps encodes reproducible across platforms.

Container format CMV1 (all integers little-endian):
  magic 'CMV1', version u16, H u32, W u32, gop_size u16, block_size u16,
  search_range u16, frame_count u32; then per GOP the raw I-frame bytes,
  and per P-frame the MV grid (dx, dy as i16, row-major) and the residual
  as i16 samples.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

CMV1_MAGIC = b"CMV1"
CMV1_VERSION = 1


@dataclass
class CodecConfig:
    block_size: int = 8
    search_range: int = 7
    gop_size: int = 12

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        if self.search_range < 0:
            raise ValueError(f"search_range must be >= 0, got {self.search_range}")
        if self.gop_size < 2:
            raise ValueError(f"gop_size must be >= 2, got {self.gop_size}")


@dataclass
class RawVideo:
    frames: np.ndarray  # (T, H, W, 3) uint8
    frame_rate: float = 12.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.uint8)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be (T, H, W, 3), got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


@dataclass
class MotionVectorMap:
    vectors: np.ndarray  # (Hb, Wb, 2) int16, [..., 0] = dx, [..., 1] = dy
    block_size: int


@dataclass
class Gop:
    i_frame: np.ndarray  # (H, W, 3) uint8
    p_frames: list  # of (MotionVectorMap, residual int16 (H, W, 3))


@dataclass
class CompressedVideo:
    config: CodecConfig
    height: int
    width: int
    frame_count: int
    gops: list = field(default_factory=list)

    def iframe_indices(self) -> list[int]:
        return [g * self.config.gop_size for g in range(len(self.gops))]


def pad_frames_to_block(frames: np.ndarray, block_size: int):
    """Edge-replicate pad H and W up to multiples of block_size.

    Returns (padded frames, (orig_h, orig_w)).
    """
    t, h, w, _ = frames.shape
    ph = (-h) % block_size
    pw = (-w) % block_size
    if ph == 0 and pw == 0:
        return frames, (h, w)
    padded = np.pad(frames, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge")
    return padded, (h, w)


def _sorted_offsets(search_range: int) -> list[tuple[int, int]]:
    # tie-break priority: smallest |dx|+|dy|, then smallest dy, then smallest dx
    offs = [
        (dx, dy)
        for dy in range(-search_range, search_range + 1)
        for dx in range(-search_range, search_range + 1)
    ]
    offs.sort(key=lambda o: (abs(o[0]) + abs(o[1]), o[1], o[0]))
    return offs


# any block containing a sentinel pixel costs more than the worst valid block
# (8*8*3*255 = 48960) and less than int32 overflow even if fully sentinel
_SAD_SENTINEL = np.int32(5_000_000)


def _estimate_motion_batch(refs: np.ndarray, tgts: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """SAD search for n (reference, target) pairs at once -> (n, Hb, Wb, 2)."""
    n, h, w, _ = tgts.shape
    b = cfg.block_size
    hb, wb = h // b, w // b
    r = cfg.search_range
    best = np.zeros((n, hb, wb, 2), dtype=np.int16)
    if r == 0:
        return best
    refi = refs.astype(np.int16)
    tgti = tgts.astype(np.int16)
    best_sad = np.full((n, hb, wb), np.iinfo(np.int32).max, dtype=np.int32)
    buf = np.empty((n, h, w), dtype=np.int32)
    for dx, dy in _sorted_offsets(r):
        y0, y1 = max(0, -dy), h - max(0, dy)
        x0, x1 = max(0, -dx), w - max(0, dx)
        buf[...] = _SAD_SENTINEL
        d = tgti[:, y0:y1, x0:x1] - refi[:, y0 + dy : y1 + dy, x0 + dx : x1 + dx]
        np.abs(d, out=d)
        c = d[..., 0].astype(np.int32)  # summing channels by strided adds beats
        c += d[..., 1]                  # a length-3 axis reduction by a lot
        c += d[..., 2]
        buf[:, y0:y1, x0:x1] = c
        sad = buf.reshape(n, hb, b, w).sum(axis=2, dtype=np.int32)
        sad = sad.reshape(n, hb, wb, b).sum(axis=3, dtype=np.int32)
        better = sad < best_sad  # strict: ties keep the higher-priority offset
        best_sad[better] = sad[better]
        best[better] = (dx, dy)
    return best


def estimate_motion(reference: np.ndarray, target: np.ndarray, cfg: CodecConfig) -> MotionVectorMap:
    """Exhaustive-search block matching minimizing SAD over all 3 channels.

    The vector (dx, dy) of each target block points to its best match in the
    reference: ref[y+dy : y+dy+b, x+dx : x+dx+b]. Candidates that would read
    outside the reference are excluded from that block's window.
    """
    if reference.shape != target.shape:
        raise ValueError(f"frame shape mismatch: reference {reference.shape} vs target {target.shape}")
    h, w, _ = target.shape
    b = cfg.block_size
    if h % b or w % b:
        raise ValueError(f"frame dims ({h}, {w}) not divisible by block_size {b}")
    vectors = _estimate_motion_batch(reference[None], target[None], cfg)[0]
    return MotionVectorMap(vectors=vectors, block_size=b)


def motion_compensate(reference: np.ndarray, mv: MotionVectorMap) -> np.ndarray:
    """Predict a frame by copying each block from its reference position."""
    h, w, _ = reference.shape
    b = mv.block_size
    dx = np.repeat(np.repeat(mv.vectors[:, :, 0], b, axis=0), b, axis=1).astype(np.int64)
    dy = np.repeat(np.repeat(mv.vectors[:, :, 1], b, axis=0), b, axis=1).astype(np.int64)
    rows = np.arange(h)[:, None] + dy
    cols = np.arange(w)[None, :] + dx
    return reference[rows, cols]


def encode_video(video: RawVideo, cfg: CodecConfig | None = None) -> CompressedVideo:
    """Frame t becomes an I-frame iff t % gop_size == 0; P-frames reference
    the immediately preceding reconstructed frame."""
    cfg = cfg or CodecConfig()
    if video.n_frames == 0:
        raise ValueError("cannot encode an empty video")
    frames, _ = pad_frames_to_block(video.frames, cfg.block_size)
    cv = CompressedVideo(
        config=cfg, height=frames.shape[1], width=frames.shape[2], frame_count=frames.shape[0]
    )
    n = frames.shape[0]
    for start in range(0, n, cfg.gop_size):
        end = min(start + cfg.gop_size, n)
        gop = Gop(i_frame=frames[start].copy(), p_frames=[])
        # residuals are lossless, so every reconstructed frame equals its
        # source; the whole GOP's motion search can run as one batch
        if end - start > 1:
            vectors = _estimate_motion_batch(frames[start : end - 1], frames[start + 1 : end], cfg)
            recon = frames[start]
            for i, t in enumerate(range(start + 1, end)):
                mv = MotionVectorMap(vectors=vectors[i], block_size=cfg.block_size)
                pred = motion_compensate(recon, mv)
                residual = frames[t].astype(np.int16) - pred.astype(np.int16)
                gop.p_frames.append((mv, residual))
                recon = (pred.astype(np.int32) + residual).astype(np.uint8)
        cv.gops.append(gop)
    return cv


def validate_compressed(cv: CompressedVideo):
    """Structural checks; raises naming the offending GOP/frame."""
    g = cv.config.gop_size
    expected_gops = (cv.frame_count + g - 1) // g
    if len(cv.gops) != expected_gops:
        raise ValueError(f"expected {expected_gops} GOPs for {cv.frame_count} frames, found {len(cv.gops)}")
    remaining = cv.frame_count
    hb, wb = cv.height // cv.config.block_size, cv.width // cv.config.block_size
    for gi, gop in enumerate(cv.gops):
        expect_p = min(remaining, g) - 1
        if len(gop.p_frames) != expect_p:
            raise ValueError(f"GOP {gi}: expected {expect_p} P-frames, found {len(gop.p_frames)}")
        for pi, (mv, residual) in enumerate(gop.p_frames):
            if mv.vectors.shape != (hb, wb, 2):
                raise ValueError(f"GOP {gi} P-frame {pi}: MV grid shape {mv.vectors.shape}, expected {(hb, wb, 2)}")
            if np.abs(mv.vectors).max(initial=0) > cv.config.search_range:
                raise ValueError(
                    f"GOP {gi} P-frame {pi}: motion vector exceeds search_range {cv.config.search_range}"
                )
            if residual.shape != (cv.height, cv.width, 3):
                raise ValueError(f"GOP {gi} P-frame {pi}: residual shape {residual.shape}")
        remaining -= expect_p + 1


def decode_video(cv: CompressedVideo) -> RawVideo:
    validate_compressed(cv)
    frames = np.empty((cv.frame_count, cv.height, cv.width, 3), dtype=np.uint8)
    t = 0
    for gop in cv.gops:
        recon = gop.i_frame
        frames[t] = recon
        t += 1
        for mv, residual in gop.p_frames:
            pred = motion_compensate(recon, mv)
            recon = np.clip(pred.astype(np.int32) + residual, 0, 255).astype(np.uint8)
            frames[t] = recon
            t += 1
    return RawVideo(frames=frames)


def mv_map_at(cv: CompressedVideo, t: int) -> np.ndarray | None:
    """Pixel-offset grid of frame t, or None when t is an I-frame."""
    g = cv.config.gop_size
    if t % g == 0:
        return None
    return cv.gops[t // g].p_frames[t % g - 1][0].vectors


def iframe_image(cv: CompressedVideo, frame_index: int) -> np.ndarray:
    if frame_index % cv.config.gop_size != 0:
        raise ValueError(f"frame {frame_index} is not an I-frame")
    return cv.gops[frame_index // cv.config.gop_size].i_frame


def extract_modalities(cv: CompressedVideo, t0: int, n: int, out_size: tuple[int, int] | None = None):
    """MV maps of frames [t0, t0+n) at pixel resolution plus nearby I-frames.

    I-frame slots contribute all-zero maps. The returned clip is float64 of
    shape (n, 2, h, w), channel 0 = dx, channel 1 = dy; when out_size is
    given the maps are nearest-neighbor resampled and the offset values are
    rescaled by the spatial scale factor. Also returns the I-frame indices
    within the window extended by one GOP on each side.
    """
    if t0 < 0 or n < 1 or t0 + n > cv.frame_count:
        raise ValueError(f"window [{t0}, {t0 + n}) outside video of {cv.frame_count} frames")
    b = cv.config.block_size
    h, w = cv.height, cv.width
    clip = np.zeros((n, 2, h, w), dtype=np.float64)
    for i, t in enumerate(range(t0, t0 + n)):
        grid = mv_map_at(cv, t)
        if grid is None:
            continue
        full = np.repeat(np.repeat(grid, b, axis=0), b, axis=1)  # (H, W, 2)
        clip[i] = full.transpose(2, 0, 1)
    if out_size is not None:
        oh, ow = out_size
        ys = np.minimum((np.arange(oh) * h) // oh, h - 1)
        xs = np.minimum((np.arange(ow) * w) // ow, w - 1)
        clip = clip[:, :, ys[:, None], xs[None, :]]
        clip[:, 0] *= ow / w
        clip[:, 1] *= oh / h
    g = cv.config.gop_size
    lo, hi = t0 - g, t0 + n - 1 + g
    iframes = [t for t in cv.iframe_indices() if lo <= t <= hi]
    return iframes, clip


@dataclass
class BenchReport:
    n_videos: int
    total_frames: int
    encode_fps: list
    extract_fps: list

    def summary(self) -> dict:
        mean = lambda xs: float(np.mean(xs)) if xs else 0.0
        return {
            "n_videos": self.n_videos,
            "total_frames": self.total_frames,
            "encode_fps_mean": mean(self.encode_fps),
            "extract_fps_mean": mean(self.extract_fps),
        }


def bench_codec(videos: list[RawVideo], cfg: CodecConfig | None = None) -> BenchReport:
    """Encode/extract throughput report; informational only, no pass/fail."""
    cfg = cfg or CodecConfig()
    report = BenchReport(
        n_videos=len(videos), total_frames=sum(v.n_frames for v in videos), encode_fps=[], extract_fps=[]
    )
    for v in videos:
        start = time.perf_counter()
        cv = encode_video(v, cfg)
        report.encode_fps.append(v.n_frames / max(time.perf_counter() - start, 1e-9))
        start = time.perf_counter()
        step = max(1, cv.frame_count // 8)
        n_extracted = 0
        for t0 in range(0, cv.frame_count - 7, step):
            extract_modalities(cv, t0, 8)
            n_extracted += 8
        if n_extracted:
            report.extract_fps.append(n_extracted / max(time.perf_counter() - start, 1e-9))
    return report


# -- CMV1 container ------------------------------------------------------------

_HEADER = struct.Struct("<4sHIIHHHI")


def write_cmv1(cv: CompressedVideo, path):
    validate_compressed(cv)
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                CMV1_MAGIC,
                CMV1_VERSION,
                cv.height,
                cv.width,
                cv.config.gop_size,
                cv.config.block_size,
                cv.config.search_range,
                cv.frame_count,
            )
        )
        for gop in cv.gops:
            fh.write(gop.i_frame.astype("<u1").tobytes())
            for mv, residual in gop.p_frames:
                fh.write(mv.vectors.astype("<i2").tobytes())
                fh.write(residual.astype("<i2").tobytes())


def read_cmv1(path) -> CompressedVideo:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, h, w, gop_size, block_size, search_range, frame_count = _HEADER.unpack(raw)
        if magic != CMV1_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != CMV1_VERSION:
            raise ValueError(f"{path}: unsupported CMV1 version {version}")
        cfg = CodecConfig(block_size=block_size, search_range=search_range, gop_size=gop_size)
        cv = CompressedVideo(config=cfg, height=h, width=w, frame_count=frame_count)
        hb, wb = h // block_size, w // block_size
        iframe_bytes = h * w * 3
        mv_bytes = hb * wb * 2 * 2
        residual_bytes = h * w * 3 * 2
        remaining = frame_count
        gi = 0
        while remaining > 0:
            data = fh.read(iframe_bytes)
            if len(data) < iframe_bytes:
                raise ValueError(f"{path}: GOP {gi}: truncated I-frame")
            iframe = np.frombuffer(data, dtype="<u1").reshape(h, w, 3).copy()
            gop = Gop(i_frame=iframe, p_frames=[])
            n_p = min(remaining, gop_size) - 1
            for pi in range(n_p):
                mv_raw = fh.read(mv_bytes)
                res_raw = fh.read(residual_bytes)
                if len(mv_raw) < mv_bytes or len(res_raw) < residual_bytes:
                    raise ValueError(f"{path}: GOP {gi} P-frame {pi}: truncated")
                vectors = np.frombuffer(mv_raw, dtype="<i2").reshape(hb, wb, 2).copy()
                residual = np.frombuffer(res_raw, dtype="<i2").reshape(h, w, 3).copy()
                gop.p_frames.append((MotionVectorMap(vectors=vectors, block_size=block_size), residual))
            cv.gops.append(gop)
            remaining -= n_p + 1
            gi += 1
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after {frame_count} frames")
    validate_compressed(cv)
    return cv
