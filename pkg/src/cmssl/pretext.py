"""Sampling, augmentation, and the contrastive objectives.

The joint objective combines a batch-level context matching loss between
clip and I-frame embeddings with a pointwise motion prediction loss between
predicted and encoded future motion features, extended by same-video hard
negative motion clips in the denominator pool. Variant toggles cover the
current-vs-future target period and the InfoNCE-vs-MSE motion loss.

All augmentation happens in model space (frames already resized to the
network input size), so an identity parameter draw leaves a sample
bit-identical. Horizontal flips negate the dx channel of motion maps, and
crops rescale offsets by the resize factor.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .codec import CompressedVideo, decode_video, extract_modalities, read_cmv1
from .networks import ModelBundle, ModelConfig
from .synthgen import load_manifest
from .tensor import Tensor


@dataclass
class PretextConfig:
    temperature: float = 0.1
    alpha: float = 0.5
    target_period: str = "future"  # future | current
    motion_loss: str = "pointwise_infonce"  # pointwise_infonce | mse
    hard_negative_count: int = 3
    embed_dim: int = 32
    clip_stride: int = 2
    iframe_window_gops: int = 1
    crop_min_scale: float = 0.6
    flip_prob: float = 0.5
    blur_prob: float = 0.5
    jitter_strength: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.target_period not in ("future", "current"):
            raise ValueError(f"unknown target_period {self.target_period!r}")
        if self.motion_loss not in ("pointwise_infonce", "mse"):
            raise ValueError(f"unknown motion_loss {self.motion_loss!r}")


@dataclass
class VideoRecord:
    video_id: int
    frames: np.ndarray  # (T, H, W, 3) uint8, decoded
    cv: CompressedVideo
    context_class: int
    motion_class: int
    split: str


def load_videos(dataset_dir, split: str | None = None) -> list[VideoRecord]:
    """Decode every dataset video into memory (desk scale keeps this cheap)."""
    dataset_dir = Path(dataset_dir)
    records = []
    for i, rec in enumerate(load_manifest(dataset_dir)):
        if split is not None and rec["split"] != split:
            continue
        cv = read_cmv1(dataset_dir / rec["path"])
        records.append(
            VideoRecord(
                video_id=i,
                frames=decode_video(cv).frames,
                cv=cv,
                context_class=rec["context_class"],
                motion_class=rec["motion_class"],
                split=rec["split"],
            )
        )
    return records


def resize_nn(frames: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of (..., H, W, C) along the two spatial axes."""
    h, w = frames.shape[-3], frames.shape[-2]
    oh, ow = size
    ys = np.minimum((np.arange(oh) * h) // oh, h - 1)
    xs = np.minimum((np.arange(ow) * w) // ow, w - 1)
    return frames[..., ys[:, None], xs[None, :], :]


# -- index-level sampling (pure, cheap to audit) --------------------------------


@dataclass
class SampleIndices:
    video_id: int
    clip_start: int
    clip_indices: np.ndarray
    iframe_index: int
    mv_indices: np.ndarray
    negative_mv_starts: list


def clip_window_length(clip_len: int, stride: int) -> int:
    return (clip_len - 1) * stride + 1


def valid_clip_start_range(n_frames, clip_len, stride, horizon) -> int:
    """Largest valid clip start (inclusive); negative means video too short.

    The horizon is reserved for both target periods so that toggling the
    period swaps only the supervision window, never the clip distribution."""
    return n_frames - clip_window_length(clip_len, stride) - horizon


def build_motion_target(clip_start: int, clip_indices: np.ndarray, horizon: int, cfg: PretextConfig) -> np.ndarray:
    """Frame indices of the motion supervision window for either period."""
    if cfg.target_period == "future":
        end = int(clip_indices[-1])
        return np.arange(end + 1, end + 1 + horizon)
    # current: ride along the clip window, evenly subsampled to the horizon
    if len(clip_indices) == horizon:
        return clip_indices.copy()
    pos = np.linspace(0, len(clip_indices) - 1, horizon)
    return clip_indices[np.floor(pos + 0.5).astype(int)]


def draw_sample_indices(
    n_frames: int,
    video_id: int,
    iframe_positions: list[int],
    gop_size: int,
    model_cfg: ModelConfig,
    cfg: PretextConfig,
    rng: np.random.Generator,
) -> SampleIndices | None:
    """Pure index logic for one training sample; None if the video is too short."""
    clip_len, horizon = model_cfg.clip_len, model_cfg.mv_len
    max_start = valid_clip_start_range(n_frames, clip_len, cfg.clip_stride, horizon)
    if max_start < 0:
        return None
    start = int(rng.integers(0, max_start + 1))
    clip_indices = start + cfg.clip_stride * np.arange(clip_len)
    clip_end = int(clip_indices[-1])

    lo = start - cfg.iframe_window_gops * gop_size
    hi = clip_end + cfg.iframe_window_gops * gop_size
    nearby = [t for t in iframe_positions if lo <= t <= hi]
    if not nearby:
        nearby = [min(iframe_positions, key=lambda t: abs(t - start))]
    iframe_index = int(nearby[rng.integers(0, len(nearby))])

    mv_indices = build_motion_target(start, clip_indices, horizon, cfg)
    if mv_indices[-1] >= n_frames:
        return None

    p_lo, p_hi = int(mv_indices[0]), int(mv_indices[-1])
    max_overlap = horizon / 2.0
    candidates = []
    for s in range(0, n_frames - horizon + 1):
        overlap = max(0, min(s + horizon - 1, p_hi) - max(s, p_lo) + 1)
        if overlap < max_overlap:
            candidates.append(s)
    if not candidates:
        return None
    neg_starts = [int(candidates[rng.integers(0, len(candidates))]) for _ in range(cfg.hard_negative_count)]
    return SampleIndices(
        video_id=video_id,
        clip_start=start,
        clip_indices=clip_indices,
        iframe_index=iframe_index,
        mv_indices=mv_indices,
        negative_mv_starts=neg_starts,
    )


# -- sample materialization and augmentation -------------------------------------


@dataclass
class TrainingSample:
    video_id: int
    clip: np.ndarray  # (3, T, h, w) float in [0, 1]
    iframe: np.ndarray  # (3, h, w)
    future_mv: np.ndarray  # (2, T', h, w), offsets normalized by search_range
    hard_negative_mvs: np.ndarray  # (k, 2, T', h, w)
    indices: SampleIndices | None = None


@dataclass
class AugmentParams:
    crop: tuple  # (top, left, size) in model-space pixels
    flip: bool
    blur_sigma: float  # 0 disables
    brightness: float
    contrast: float


def identity_augment(size: int) -> AugmentParams:
    return AugmentParams(crop=(0, 0, size), flip=False, blur_sigma=0.0, brightness=1.0, contrast=1.0)


def draw_augment_params(size: int, cfg: PretextConfig, rng: np.random.Generator) -> AugmentParams:
    scale = rng.uniform(cfg.crop_min_scale, 1.0)
    crop_size = max(8, int(np.floor(size * scale + 0.5)))
    crop_size = min(crop_size, size)
    top = int(rng.integers(0, size - crop_size + 1))
    left = int(rng.integers(0, size - crop_size + 1))
    flip = bool(rng.random() < cfg.flip_prob)
    blur_sigma = float(rng.uniform(0.3, 1.0)) if rng.random() < cfg.blur_prob else 0.0
    j = cfg.jitter_strength
    brightness = float(rng.uniform(1.0 - j, 1.0 + j))
    contrast = float(rng.uniform(1.0 - j, 1.0 + j))
    return AugmentParams(crop=(top, left, crop_size), flip=flip, blur_sigma=blur_sigma,
                         brightness=brightness, contrast=contrast)


def _blur(frames: np.ndarray, sigma: float) -> np.ndarray:
    """Separable 3-tap Gaussian along the last two spatial axes of (..., H, W)."""
    if sigma <= 0.0:
        return frames
    k1 = np.exp(-0.5 / (sigma * sigma))
    kernel = np.array([k1, 1.0, k1])
    kernel /= kernel.sum()
    for axis in (-2, -1):
        p = np.concatenate(
            [frames.take([0], axis=axis), frames, frames.take([-1], axis=axis)], axis=axis
        )
        frames = (
            kernel[0] * p.take(range(0, frames.shape[axis]), axis=axis)
            + kernel[1] * p.take(range(1, frames.shape[axis] + 1), axis=axis)
            + kernel[2] * p.take(range(2, frames.shape[axis] + 2), axis=axis)
        )
    return frames


def augment_frames(frames: np.ndarray, params: AugmentParams, out_size: int) -> np.ndarray:
    """Crop/resize/flip/blur/jitter image frames of shape (..., H, W, C) in [0, 1]."""
    top, left, size = params.crop
    if size > frames.shape[-3] or size > frames.shape[-2]:
        raise ValueError(f"crop {size} larger than frame {frames.shape[-3:-1]}")
    out = frames[..., top : top + size, left : left + size, :]
    if size != out_size:
        out = resize_nn(out, (out_size, out_size))
    if params.flip:
        out = out[..., ::-1, :]
    out = _blur(out.astype(np.float64), params.blur_sigma)
    if params.brightness != 1.0:
        out = out * params.brightness
    if params.contrast != 1.0:
        mean = out.mean(axis=(-3, -2), keepdims=True)
        out = (out - mean) * params.contrast + mean
    return np.clip(out, 0.0, 1.0)


def augment_mv(mv: np.ndarray, params: AugmentParams, out_size: int) -> np.ndarray:
    """Crop/resize/flip motion maps (..., 2, T, H, W); offsets track the geometry."""
    top, left, size = params.crop
    if size > mv.shape[-2] or size > mv.shape[-1]:
        raise ValueError(f"crop {size} larger than mv map {mv.shape[-2:]}")
    out = mv[..., top : top + size, left : left + size].astype(np.float64)
    if size != out_size:
        ys = np.minimum((np.arange(out_size) * size) // out_size, size - 1)
        xs = np.minimum((np.arange(out_size) * size) // out_size, size - 1)
        out = out[..., ys[:, None], xs[None, :]]
        factor = out_size / size
        out = out * factor  # offsets are in pixels; rescale with the raster
    if params.flip:
        out = out[..., ::-1].copy()
        out[..., 0, :, :, :] = -out[..., 0, :, :, :]  # dx channel flips sign
    return out


def materialize_sample(
    video: VideoRecord, idx: SampleIndices, model_cfg: ModelConfig, cfg: PretextConfig,
    rng: np.random.Generator | None = None, train: bool = True,
) -> TrainingSample:
    """Extract model-space arrays for drawn indices, then augment.

    The positive motion clip reuses the clip's crop and flip; the I-frame and
    each hard negative get independent draws. Eval mode applies the identity.
    """
    size = model_cfg.input_size
    horizon = model_cfg.mv_len
    scale_hw = (size, size)

    clip_frames = resize_nn(video.frames[idx.clip_indices], scale_hw).astype(np.float64) / 255.0
    iframe = resize_nn(video.frames[idx.iframe_index], scale_hw).astype(np.float64) / 255.0

    def mv_window(t0: int, indices: np.ndarray | None = None) -> np.ndarray:
        if indices is None:
            _, clip = extract_modalities(video.cv, t0, horizon, out_size=scale_hw)
        else:
            lo, hi = int(indices[0]), int(indices[-1])
            _, full = extract_modalities(video.cv, lo, hi - lo + 1, out_size=scale_hw)
            clip = full[indices - lo]
        return clip.transpose(1, 0, 2, 3)  # (2, T', h, w)

    pos_mv = mv_window(0, idx.mv_indices)
    neg_mvs = np.stack([mv_window(s) for s in idx.negative_mv_starts]) if idx.negative_mv_starts else np.zeros((0, 2, horizon, size, size))

    if train:
        if rng is None:
            raise ValueError("training-mode materialization needs an rng")
        clip_params = draw_augment_params(size, cfg, rng)
        iframe_params = draw_augment_params(size, cfg, rng)
        neg_params = [draw_augment_params(size, cfg, rng) for _ in range(len(neg_mvs))]
    else:
        clip_params = iframe_params = identity_augment(size)
        neg_params = [identity_augment(size)] * len(neg_mvs)

    clip = augment_frames(clip_frames, clip_params, size).transpose(3, 0, 1, 2)
    ifr = augment_frames(iframe, iframe_params, size).transpose(2, 0, 1)
    pos = augment_mv(pos_mv, clip_params, size)  # crop/flip shared with the clip
    negs = (
        np.stack([augment_mv(m, p, size) for m, p in zip(neg_mvs, neg_params)])
        if len(neg_mvs)
        else neg_mvs
    )

    sr = max(video.cv.config.search_range, 1)
    return TrainingSample(
        video_id=video.video_id,
        clip=clip,
        iframe=ifr,
        future_mv=pos / sr,
        hard_negative_mvs=negs / sr,
        indices=idx,
    )


def sample_training_batch(
    videos: list[VideoRecord], batch_size: int, model_cfg: ModelConfig, cfg: PretextConfig,
    rng: np.random.Generator, video_ids: list[int] | None = None,
) -> list[TrainingSample]:
    """Draw B samples from distinct videos (cycling when B exceeds the pool)."""
    if not videos:
        raise ValueError("empty video pool")
    if video_ids is None:
        perm = rng.permutation(len(videos))
        chosen = [videos[perm[i % len(videos)]] for i in range(batch_size)]
    else:
        by_id = {v.video_id: v for v in videos}
        chosen = [by_id[i] for i in video_ids]
    samples = []
    for video in chosen:
        idx = draw_sample_indices(
            video.frames.shape[0], video.video_id, video.cv.iframe_indices(),
            video.cv.config.gop_size, model_cfg, cfg, rng,
        )
        if idx is None:
            warnings.warn(f"video {video.video_id} too short for clip+horizon, skipped")
            continue
        samples.append(materialize_sample(video, idx, model_cfg, cfg, rng=rng, train=True))
    if not samples:
        raise ValueError("no video in the pool is long enough for the configured windows")
    return samples


def collate(samples: list[TrainingSample]) -> dict:
    return {
        "clip": np.stack([s.clip for s in samples]),
        "iframe": np.stack([s.iframe for s in samples]),
        "mv": np.stack([s.future_mv for s in samples]),
        "neg_mv": np.concatenate([s.hard_negative_mvs for s in samples], axis=0),
        "video_ids": np.array([s.video_id for s in samples]),
    }


# -- losses ------------------------------------------------------------------------


def context_matching_loss(clip_emb: Tensor, iframe_emb: Tensor, tau: float):
    """Batch InfoNCE between clip anchors and I-frame candidates.

    Returns (loss, similarity logits as numpy (B_anchor, B_candidate))."""
    B = clip_emb.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    if iframe_emb.shape[0] != B:
        raise ValueError(f"batch mismatch: {B} clips vs {iframe_emb.shape[0]} iframes")
    xn = T.l2_normalize(clip_emb, axis=1)
    zn = T.l2_normalize(iframe_emb, axis=1)
    logits = T.scale(T.matmul(xn, T.transpose(zn, (1, 0))), 1.0 / tau)  # [i, k] = cos(z_k, x_i)/tau
    log_z = T.logsumexp(logits, axis=1)
    diag = T.tsum(T.mul(logits, Tensor(np.eye(B))), axis=1)
    loss = T.tmean(T.sub(log_z, diag))
    return loss, logits.data * tau


def motion_prediction_loss(pred: Tensor, truth: Tensor, negatives: Tensor | None, tau: float):
    """Pointwise InfoNCE: anchors are predicted points, positives the true
    point at the same (video, position); hard-negative points only enlarge
    the denominator pool. Returns (loss, logits numpy (P, Q))."""
    B, C, N = pred.shape
    if tuple(truth.shape) != (B, C, N):
        raise ValueError(f"pred {tuple(pred.shape)} vs truth {tuple(truth.shape)} shape mismatch")
    P = B * N
    anchors = T.l2_normalize(T.reshape(T.transpose(pred, (0, 2, 1)), (P, C)), axis=1)
    pool = T.l2_normalize(T.reshape(T.transpose(truth, (0, 2, 1)), (P, C)), axis=1)
    if negatives is not None and negatives.shape[0] > 0:
        Q_extra = negatives.shape[0] * N
        neg = T.l2_normalize(T.reshape(T.transpose(negatives, (0, 2, 1)), (Q_extra, C)), axis=1)
        pool = T.concat([pool, neg], axis=0)
    logits = T.scale(T.matmul(anchors, T.transpose(pool, (1, 0))), 1.0 / tau)  # (P, Q)
    log_z = T.logsumexp(logits, axis=1)
    mask = np.zeros((P, pool.shape[0]))
    mask[np.arange(P), np.arange(P)] = 1.0
    diag = T.tsum(T.mul(logits, Tensor(mask)), axis=1)
    loss = T.tmean(T.sub(log_z, diag))
    return loss, logits.data * tau


def motion_mse_loss(pred: Tensor, truth: Tensor) -> Tensor:
    """Plain MSE on raw motion values (the direct-regression variant)."""
    if tuple(pred.shape) != tuple(truth.shape):
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(truth.shape)}")
    d = T.sub(pred, truth)
    return T.tmean(T.mul(d, d))


def joint_loss(j_i: Tensor | None, j_m: Tensor | None, alpha: float) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 0.0:
        return j_i
    if alpha == 1.0:
        return j_m
    return T.add(T.scale(j_i, 1.0 - alpha), T.scale(j_m, alpha))


def pool_mv_values(mv: np.ndarray, out_shape: tuple) -> np.ndarray:
    """Average-pool raw (B, 2, T', h, w) motion values to (B, 2, T3, H3, W3);
    regression target for the MSE variant."""
    B, c, t, h, w = mv.shape
    _, t3, h3, w3 = out_shape
    ft, fh, fw = t // t3, h // h3, w // w3
    return mv.reshape(B, c, t3, ft, h3, fh, w3, fw).mean(axis=(3, 5, 7))


# -- full pretext forward ------------------------------------------------------------


@dataclass
class PretextOutput:
    loss: Tensor
    j_i: Tensor | None
    j_m: Tensor | None
    context_logits: np.ndarray | None
    motion_logits: np.ndarray | None


def pretext_forward(
    bundle: ModelBundle, batch: dict, cfg: PretextConfig, training: bool = True,
    rng: np.random.Generator | None = None,
) -> PretextOutput:
    """Run every branch the configured objective needs and combine losses."""
    del training, rng  # no dropout in the pretext path; kept for interface parity
    c3, t3, h3, w3 = bundle.config.motion_feat_shape
    n_points = t3 * h3 * w3
    j_i = j_m = None
    context_logits = motion_logits = None

    xv = bundle.v_forward(batch["clip"])  # (B, C1, T1, H1, W1)
    B = xv.shape[0]

    if cfg.alpha < 1.0:
        zi = bundle.i_forward(batch["iframe"])
        clip_emb = bundle.g_v.forward(T.tmean(xv, axis=(2, 3, 4)))
        iframe_emb = bundle.g_i.forward(T.tmean(zi, axis=(2, 3)))
        j_i, context_logits = context_matching_loss(clip_emb, iframe_emb, cfg.temperature)

    if cfg.alpha > 0.0:
        vhat = bundle.transformer_predict(xv)  # (B, C3, T3, H3, W3)
        if cfg.motion_loss == "mse":
            flat = T.reshape(vhat, (B, c3, n_points))
            pred_pts = T.transpose(bundle.value_head(T.transpose(flat, (0, 2, 1))), (0, 2, 1))
            pred = T.reshape(pred_pts, (B, 2, t3, h3, w3))
            target = pool_mv_values(batch["mv"], (2, t3, h3, w3))
            j_m = motion_mse_loss(pred, Tensor(target))
        else:
            vm = bundle.m_forward(batch["mv"])
            truth = bundle.g_m1.forward_points(T.reshape(vm, (B, c3, n_points)))
            pred = bundle.g_m2.forward_points(T.reshape(vhat, (B, c3, n_points)))
            negatives = None
            if batch["neg_mv"].shape[0] > 0:
                vneg = bundle.m_forward(batch["neg_mv"])
                nneg = vneg.shape[0]
                negatives = bundle.g_m1.forward_points(T.reshape(vneg, (nneg, c3, n_points)))
            j_m, motion_logits = motion_prediction_loss(pred, truth, negatives, cfg.temperature)

    return PretextOutput(
        loss=joint_loss(j_i, j_m, cfg.alpha),
        j_i=j_i,
        j_m=j_m,
        context_logits=context_logits,
        motion_logits=motion_logits,
    )
