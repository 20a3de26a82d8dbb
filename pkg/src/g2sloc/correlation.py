"""Uncertainty-guided dense translation search.

A synthesized overhead template slides over the observed satellite feature
map; each placement is scored by normalized cross-correlation computed
jointly over all channels (template statistics are global, window statistics
are per position).  Dividing the score map by a per-pixel uncertainty map
suppresses implausible vehicle locations, and the argmax pixel converts to a
metric translation estimate.

Two NCC paths are provided: a direct one (explicit window copies and dot
products, the reference) and an FFT one (spectral products for the cross
terms, integral images for the window sums).  They agree to 1e-4 and the
FFT path is the fast production kernel.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .geometry import Pose3DoF, SatelliteMeta, build_grid, bilinear_forward

UNCERTAINTY_EPS = 1e-3
_VAR_FLOOR = 1e-12


@dataclass
class UncertaintyMap:
    """Per-pixel scalar in (0, 1); higher means the vehicle is less likely
    to be at that location."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError("uncertainty map", self.values.shape, ("H", "W"))
        if self.values.min() < UNCERTAINTY_EPS - 1e-12 or self.values.max() > 1 - UNCERTAINTY_EPS + 1e-12:
            raise ValueError(
                f"uncertainty values must lie in [{UNCERTAINTY_EPS}, {1 - UNCERTAINTY_EPS}], "
                f"got [{self.values.min():.3g}, {self.values.max():.3g}]"
            )


@dataclass
class ProbabilityMap:
    """Scores over valid template placements plus the argmax peak."""

    values: np.ndarray
    argmax: tuple[int, int]
    peak: float
    searched: np.ndarray  # bool mask of placements inside the search window


def _check_template(search: np.ndarray, template: np.ndarray):
    if search.ndim != 3 or template.ndim != 3:
        raise ShapeError("correlation inputs", search.shape, template.shape)
    if search.shape[0] != template.shape[0]:
        raise ShapeError("correlation channel counts", search.shape, template.shape)
    if template.shape[1] > search.shape[1] or template.shape[2] > search.shape[2]:
        raise ShapeError("template must fit inside search map", template.shape, search.shape)


def _prepare_template(template: np.ndarray, mask: np.ndarray | None):
    """Centered template, its norm, and the window support size.

    With a mask, statistics run over the supported entries only, so masked
    tap values contribute nothing anywhere downstream; without one the
    support is the full template box.
    """
    if mask is None:
        support = float(template.size)
        t_centered = template - template.mean()
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), template.shape)
        support = float(mask.sum())
        if support < 1.0:
            raise ConfigError("template mask has empty support")
        t_centered = (template - (template * mask).sum() / support) * mask
    t_norm = float(np.sqrt(np.sum(t_centered * t_centered)))
    return t_centered, t_norm, support


def _finish_ncc(cross, win_sum, win_sq, support, t_norm):
    win_var = np.maximum(win_sq - win_sum * win_sum / support, 0.0)
    denom = np.sqrt(win_var) * t_norm
    ok = denom > _VAR_FLOOR
    return np.where(ok, cross / np.where(ok, denom, 1.0), 0.0)


def ncc_direct(search: np.ndarray, template: np.ndarray,
               mask: np.ndarray | None = None,
               chunk_bytes: int = 1 << 26) -> np.ndarray:
    """Reference NCC map from explicit window extraction.

    Windows are copied position chunk by position chunk and reduced with
    dense dot products; memory use stays below ``chunk_bytes`` per chunk.
    Zero-variance windows score 0.  ``mask`` (H, W or C, H, W of the
    template) restricts scoring to the template's supported taps.
    """
    search = np.asarray(search, dtype=np.float64)
    template = np.asarray(template, dtype=np.float64)
    _check_template(search, template)
    channels, th, tw = template.shape
    h_out = search.shape[1] - th + 1
    w_out = search.shape[2] - tw + 1
    window = channels * th * tw

    t_centered, t_norm, support = _prepare_template(template, mask)
    t_flat = t_centered.reshape(-1)
    if mask is None:
        w_flat = np.ones(window)
    else:
        w_flat = np.broadcast_to(np.asarray(mask, dtype=np.float64), template.shape).reshape(-1)

    s0, s1, s2 = search.strides
    view = np.lib.stride_tricks.as_strided(
        search,
        shape=(h_out, w_out, channels, th, tw),
        strides=(s1, s2, s0, s1, s2),
    )

    cross = np.empty(h_out * w_out)
    win_sum = np.empty(h_out * w_out)
    win_sq = np.empty(h_out * w_out)
    flat_view = view.reshape(h_out * w_out, window)  # stays lazy until sliced
    chunk = max(1, chunk_bytes // (window * 8))
    for start in range(0, h_out * w_out, chunk):
        stop = min(start + chunk, h_out * w_out)
        block = np.ascontiguousarray(flat_view[start:stop])
        cross[start:stop] = block @ t_flat
        win_sum[start:stop] = block @ w_flat
        win_sq[start:stop] = (block * block) @ w_flat

    return _finish_ncc(
        cross.reshape(h_out, w_out),
        win_sum.reshape(h_out, w_out),
        win_sq.reshape(h_out, w_out),
        support,
        t_norm,
    )


def _next_fast_len(n: int) -> int:
    """Smallest 5-smooth integer >= n (keeps FFT sizes fast)."""
    while True:
        m = n
        for p in (2, 3, 5):
            while m % p == 0:
                m //= p
        if m == 1:
            return n
        n += 1


def _window_sums(plane: np.ndarray, th: int, tw: int):
    """Sliding-window sums via an integral image with a zero border."""
    integral = np.zeros((plane.shape[0] + 1, plane.shape[1] + 1))
    np.cumsum(np.cumsum(plane, axis=0), axis=1, out=integral[1:, 1:])
    return (
        integral[th:, tw:]
        - integral[:-th, tw:]
        - integral[th:, :-tw]
        + integral[:-th, :-tw]
    )


def ncc_fft(search: np.ndarray, template: np.ndarray,
            mask: np.ndarray | None = None) -> np.ndarray:
    """FFT NCC map: spectral products for the cross terms.

    Window sums come from integral images for full-box templates; with a
    support mask they come from spectral products against the mask instead
    (a box no longer describes the support).
    """
    search = np.asarray(search, dtype=np.float64)
    template = np.asarray(template, dtype=np.float64)
    _check_template(search, template)
    channels, th, tw = template.shape
    h_out = search.shape[1] - th + 1
    w_out = search.shape[2] - tw + 1

    fft_h = _next_fast_len(search.shape[1])
    fft_w = _next_fast_len(search.shape[2])
    t_centered, t_norm, support = _prepare_template(template, mask)

    spec_map = np.fft.rfft2(search, s=(fft_h, fft_w))
    spec_tpl = np.fft.rfft2(t_centered, s=(fft_h, fft_w))
    cross_full = np.fft.irfft2(spec_map * np.conj(spec_tpl), s=(fft_h, fft_w))
    cross = cross_full.sum(axis=0)[:h_out, :w_out]

    if mask is None:
        win_sum = np.zeros((h_out, w_out))
        win_sq = np.zeros((h_out, w_out))
        for plane in search:
            win_sum += _window_sums(plane, th, tw)
            win_sq += _window_sums(plane * plane, th, tw)
    else:
        mask_b = np.broadcast_to(np.asarray(mask, dtype=np.float64), template.shape)
        spec_mask = np.fft.rfft2(mask_b, s=(fft_h, fft_w))
        spec_sq = np.fft.rfft2(search * search, s=(fft_h, fft_w))
        win_sum = (
            np.fft.irfft2(spec_map * np.conj(spec_mask), s=(fft_h, fft_w))
            .sum(axis=0)[:h_out, :w_out]
        )
        win_sq = (
            np.fft.irfft2(spec_sq * np.conj(spec_mask), s=(fft_h, fft_w))
            .sum(axis=0)[:h_out, :w_out]
        )

    return _finish_ncc(cross, win_sum, win_sq, support, t_norm)


def normalized_correlation(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Scalar zero-mean correlation of two same-shape arrays (optional mask)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if mask is not None:
        a, b = a[mask], b[mask]
    a = a.reshape(-1) - a.mean()
    b = b.reshape(-1) - b.mean()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / denom) if denom > _VAR_FLOOR else 0.0


def crop_template(synth: np.ndarray, sat: SatelliteMeta, size: int):
    """Central crop of a synthesized overhead map for use as a template.

    Returns ``(template, (u_cam, v_cam))`` where the second element is the
    camera pixel position inside the crop (the synthesized map puts the
    camera at the patch center when translation is zero).
    """
    if synth.ndim != 3:
        raise ShapeError("synthesized map", synth.shape, ("C", "H", "W"))
    if size > synth.shape[1] or size > synth.shape[2]:
        raise ConfigError(f"template size {size} exceeds map {synth.shape[1:]}")
    r0 = int(round(sat.v_s0 - (size - 1) / 2.0))
    c0 = int(round(sat.u_s0 - (size - 1) / 2.0))
    r0 = min(max(r0, 0), synth.shape[1] - size)
    c0 = min(max(c0, 0), synth.shape[2] - size)
    template = synth[:, r0 : r0 + size, c0 : c0 + size]
    return template, (sat.u_s0 - c0, sat.v_s0 - r0)


def wedge_box(valid: np.ndarray, size: int) -> tuple[int, int]:
    """Top-left corner of a size x size box centered on the valid wedge.

    The synthesized overhead map has content only where the camera sees the
    ground, which for a forward-facing camera lies ahead of (not around) the
    camera pixel; centering the template on that support keeps small
    templates informative.  Falls back to the map center for empty masks.
    """
    h, w = valid.shape
    if valid.any():
        rows, cols = np.nonzero(valid)
        cr, cc = float(rows.mean()), float(cols.mean())
    else:
        cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    r0 = int(round(cr - (size - 1) / 2.0))
    c0 = int(round(cc - (size - 1) / 2.0))
    return min(max(r0, 0), h - size), min(max(c0, 0), w - size)


def locate(
    search: np.ndarray,
    template: np.ndarray,
    uncertainty: UncertaintyMap | None,
    sat: SatelliteMeta,
    template_cam: tuple[float, float],
    window_m: float | None = None,
    prior_t: tuple[float, float] = (0.0, 0.0),
    method: str = "fft",
    template_mask: np.ndarray | None = None,
):
    """Dense translation search.

    Scores every placement of the template over the satellite feature map
    (optionally restricted to a ``window_m`` x ``window_m`` region around the
    prior translation), divides by the uncertainty at each candidate camera
    pixel, and converts the peak to metres.  ``template_mask`` marks the
    template's observed support (the synthesized wedge); unobserved taps are
    excluded from the correlation statistics.  Ties break toward the
    smallest row, then column index.  Returns ``(ProbabilityMap, (t_x, t_z))``.
    """
    if method == "direct":
        ncc = ncc_direct(search, template, mask=template_mask)
    else:
        ncc = ncc_fft(search, template, mask=template_mask)
    h_out, w_out = ncc.shape
    u_cam_tpl, v_cam_tpl = template_cam

    # camera pixel in satellite coordinates for every placement
    cam_v = np.arange(h_out)[:, None] + v_cam_tpl
    cam_u = np.arange(w_out)[None, :] + u_cam_tpl

    if uncertainty is not None:
        iv = np.clip(np.round(cam_v).astype(int), 0, uncertainty.values.shape[0] - 1)
        iu = np.clip(np.round(cam_u).astype(int), 0, uncertainty.values.shape[1] - 1)
        scores = ncc / uncertainty.values[iv, iu]
    else:
        scores = ncc.copy()

    searched = np.ones_like(scores, dtype=bool)
    if window_m is not None:
        prior_x, prior_z = prior_t
        half_px = window_m / 2.0 / sat.alpha
        prior_v = sat.v_s0 - prior_x / sat.alpha
        prior_u = sat.u_s0 - prior_z / sat.alpha
        searched = (np.abs(cam_v - prior_v) <= half_px) & (np.abs(cam_u - prior_u) <= half_px)
        if not searched.any():
            raise ConfigError("search window does not intersect any valid placement")

    masked = np.where(searched, scores, -np.inf)
    flat_idx = int(np.argmax(masked))
    peak_i, peak_j = divmod(flat_idx, w_out)
    peak = float(masked[peak_i, peak_j])

    t_x = -sat.alpha * (peak_i + v_cam_tpl - sat.v_s0)
    t_z = -sat.alpha * (peak_j + u_cam_tpl - sat.u_s0)
    prob = ProbabilityMap(values=scores, argmax=(peak_i, peak_j), peak=peak, searched=searched)
    return prob, (float(t_x), float(t_z))


def gt_location_index(
    sat: SatelliteMeta, template_cam: tuple[float, float], gt_pose: Pose3DoF, shape
) -> tuple[int, int]:
    """Placement index whose camera pixel is nearest the GT translation."""
    u_cam_tpl, v_cam_tpl = template_cam
    i = int(round(sat.v_s0 - gt_pose.t_x / sat.alpha - v_cam_tpl))
    j = int(round(sat.u_s0 - gt_pose.t_z / sat.alpha - u_cam_tpl))
    h_out, w_out = shape
    if not (0 <= i < h_out and 0 <= j < w_out):
        raise ConfigError(f"GT location index ({i}, {j}) outside score map {shape}")
    return i, j


def rotation_sweep(
    ground: np.ndarray,
    satellite: np.ndarray,
    cam,
    sat: SatelliteMeta,
    candidates_rad: np.ndarray,
    template_size: int,
    uncertainty: UncertaintyMap | None = None,
    window_m: float | None = None,
    prior_t: tuple[float, float] = (0.0, 0.0),
):
    """Benchmark-only exhaustive orientation search.

    Projects the raw ground image to overhead view at each candidate azimuth
    (zero translation), correlates, and returns ``(best_pose, peaks)`` where
    the best pose carries the winning azimuth and its translation estimate.
    Not part of the primary estimation path, which refines orientation with
    the learned pose optimizer.
    """
    search = satellite if satellite.ndim == 3 else satellite[None]
    best = None
    peaks = np.empty(len(candidates_rad))
    for k, theta in enumerate(candidates_rad):
        pose = Pose3DoF(theta, 0.0, 0.0)
        grid = build_grid(pose, cam, sat, level=0)
        synth = bilinear_forward(ground if ground.ndim == 3 else ground[None], grid)
        template, template_cam = crop_template(synth, sat, template_size)
        mask, _ = crop_template(grid.valid[None].astype(np.float64), sat, template_size)
        if float(np.var(template)) < _VAR_FLOOR or mask.sum() < 32:
            peaks[k] = -np.inf
            continue
        prob, t_hat = locate(
            search, template, uncertainty, sat, template_cam,
            window_m=window_m, prior_t=prior_t, template_mask=mask[0],
        )
        peaks[k] = prob.peak
        if best is None or prob.peak > best[0]:
            best = (prob.peak, Pose3DoF(theta, t_hat[0], t_hat[1]))
    if best is None:
        raise ConfigError("rotation sweep had no valid candidate")
    return best[1], peaks


def ncc_map_op(search, template, mask: np.ndarray | None = None):
    """Tape-recorded NCC map for training (direct algorithm, analytic grads).

    ``search`` and ``template`` are tape tensors shaped (C, H, W) and
    (C, th, tw); ``mask`` is an optional binary (th, tw) support mask.  The
    forward value matches :func:`ncc_direct`; gradients flow to both inputs
    (zero at zero-variance placements, where the score is pinned to 0).
    """
    from .tensorcore import Tensor

    if not isinstance(search, Tensor) or not isinstance(template, Tensor):
        raise TypeError("ncc_map_op expects tape tensors")
    s_data, t_data = search.data, template.data
    _check_template(s_data, t_data)
    channels, th, tw = t_data.shape
    h_out = s_data.shape[1] - th + 1
    w_out = s_data.shape[2] - tw + 1
    n_pos = h_out * w_out

    if mask is None:
        w_full = np.ones_like(t_data)
    else:
        w_full = np.broadcast_to(np.asarray(mask, dtype=np.float64), t_data.shape).copy()
        if not np.all((w_full == 0.0) | (w_full == 1.0)):
            raise ConfigError("ncc_map_op mask must be binary")
    w_flat = w_full.reshape(-1)
    support = float(w_flat.sum())
    if support < 1.0:
        raise ConfigError("template mask has empty support")

    s0, s1, s2 = s_data.strides
    view = np.lib.stride_tricks.as_strided(
        s_data,
        shape=(h_out, w_out, channels, th, tw),
        strides=(s1, s2, s0, s1, s2),
    )
    windows = np.ascontiguousarray(view.reshape(n_pos, -1))

    t_mean = float((t_data.reshape(-1) * w_flat).sum() / support)
    t_centered = (t_data.reshape(-1) - t_mean) * w_flat
    t_norm = float(np.sqrt(t_centered @ t_centered))

    cross = windows @ t_centered
    win_sum = windows @ w_flat
    win_sq = (windows * windows) @ w_flat
    win_var = np.maximum(win_sq - win_sum * win_sum / support, 0.0)
    win_std = np.sqrt(win_var)
    denom = win_std * t_norm
    ok = denom > _VAR_FLOOR
    scores = np.where(ok, cross / np.where(ok, denom, 1.0), 0.0)

    def backward(grad_out, accumulate):
        g = (grad_out.reshape(-1) * ok).astype(np.float64)
        inv_ab = np.where(ok, 1.0 / np.where(ok, denom, 1.0), 0.0)
        inv_a2 = np.where(ok, 1.0 / np.where(ok, win_var, 1.0), 0.0)
        centered_w = (windows - (win_sum / support)[:, None]) * w_flat[None, :]

        d_windows = (g * inv_ab)[:, None] * t_centered[None, :]
        d_windows -= (g * scores * inv_a2)[:, None] * centered_w
        grad_search = np.zeros_like(s_data)
        d_win_grid = d_windows.reshape(h_out, w_out, channels, th, tw)
        for i in range(th):
            for j in range(tw):
                grad_search[:, i : i + h_out, j : j + w_out] += d_win_grid[:, :, :, i, j].transpose(
                    2, 0, 1
                )
        accumulate(search, grad_search)

        if t_norm > _VAR_FLOOR:
            d_template = (g * inv_ab) @ centered_w
            d_template -= ((g * scores).sum() / (t_norm * t_norm)) * t_centered
            accumulate(template, d_template.reshape(t_data.shape))
        else:
            accumulate(template, np.zeros_like(t_data))

    return search.tape.record(scores.reshape(h_out, w_out), (search, template), backward)


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    chunk = tag + payload
    return len(payload).to_bytes(4, "big") + chunk + zlib.crc32(chunk).to_bytes(4, "big")


def write_png_gray(path, image_u8: np.ndarray) -> None:
    """Minimal 8-bit grayscale PNG writer (no external imaging dependency)."""
    h, w = image_u8.shape
    header = w.to_bytes(4, "big") + h.to_bytes(4, "big") + bytes([8, 0, 0, 0, 0])
    raw = b"".join(b"\x00" + row.tobytes() for row in image_u8)
    payload = (
        b"\x89PNG\r\n\x1a\n"
        + _png_chunk(b"IHDR", header)
        + _png_chunk(b"IDAT", zlib.compress(raw, 9))
        + _png_chunk(b"IEND", b"")
    )
    Path(path).write_bytes(payload)


def write_pgm(path, image_u8: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255)."""
    h, w = image_u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image_u8.tobytes())


def to_gray_u8(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to uint8; a constant map becomes mid-gray (128)."""
    lo = float(values.min())
    hi = float(values.max())
    if hi - lo <= _VAR_FLOOR:
        return np.full(values.shape, 128, dtype=np.uint8)
    scaled = (values - lo) / (hi - lo) * 255.0
    return np.round(scaled).astype(np.uint8)


def emit_heatmap(prob: ProbabilityMap | np.ndarray, path) -> None:
    """Write a probability map as a grayscale PGM (or PNG by extension)."""
    values = prob.values if isinstance(prob, ProbabilityMap) else np.asarray(prob)
    image = to_gray_u8(values)
    path = Path(path)
    if path.suffix.lower() == ".png":
        write_png_gray(path, image)
    else:
        write_pgm(path, image)
