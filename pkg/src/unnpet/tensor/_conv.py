"""Raw numpy kernels for 3-D cross-correlation and its two adjoints.

Stride-1 correlation is done on a flattened, padded grid: for a kernel tap at
flat offset ``o`` the contribution to output position ``p`` is
``W_tap @ x[p + o]``. The taps are folded into one large GEMM and the partial
products are added back with shifted views, which keeps the heavy lifting in
BLAS. Strided convolutions are computed at stride 1 and subsampled.
"""
from __future__ import annotations

import numpy as np

# upper bound on elements of the per-chunk tap product (~256 MB in float32)
_MAX_CHUNK_ELEMS = 64 * 1024 * 1024


def out_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _flatten_channels_first(xp: np.ndarray) -> np.ndarray:
    """(N, C, D, H, W) -> contiguous (C, N*D*H*W)."""
    n, c = xp.shape[:2]
    return np.ascontiguousarray(xp.transpose(1, 0, 2, 3, 4)).reshape(c, -1)


def _tap_groups(kernel, rows_per_tap, length):
    kd, kh, kw = kernel
    taps = [(a, b, c) for a in range(kd) for b in range(kh) for c in range(kw)]
    per = max(1, _MAX_CHUNK_ELEMS // max(1, rows_per_tap * length))
    for i in range(0, len(taps), per):
        yield taps[i:i + per]


def _inplane_columns(xf: np.ndarray, kh: int, kw: int, wp: int) -> tuple[np.ndarray, int]:
    """Stack the kh*kw in-plane shifts of a flattened input: (kh*kw*C, L1)."""
    c, total = xf.shape
    length = total - ((kh - 1) * wp + (kw - 1))
    cols = np.empty((kh * kw, c, length), dtype=xf.dtype)
    i = 0
    for b in range(kh):
        for cc in range(kw):
            off = b * wp + cc
            cols[i] = xf[:, off:off + length]
            i += 1
    return cols.reshape(-1, length), length


def _sample_chunks(n: int, per_sample: int):
    """Batch slices whose working set stays near ``_MAX_CHUNK_ELEMS``."""
    step = max(1, _MAX_CHUNK_ELEMS // max(1, per_sample))
    return [slice(i, min(n, i + step)) for i in range(0, n, step)]


def correlate_s1(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid stride-1 cross-correlation of an already padded input.

    xp: (N, C, Dp, Hp, Wp); w: (O, C, kd, kh, kw) -> (N, O, Dp-kd+1, Hp-kh+1, Wp-kw+1)
    """
    n, c, dp, hp, wp = xp.shape
    o, c2, kd, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"input has {c} channels but kernel expects {c2}")
    chunks = _sample_chunks(n, max(kh * kw * c, kd * o) * dp * hp * wp)
    if len(chunks) > 1:
        return np.concatenate([_correlate_s1(xp[sl], w) for sl in chunks], axis=0)
    return _correlate_s1(xp, w)


def _correlate_s1(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, c, dp, hp, wp = xp.shape
    o, _, kd, kh, kw = w.shape
    do, ho, wo = dp - kd + 1, hp - kh + 1, wp - kw + 1
    dtype = np.result_type(xp.dtype, w.dtype)
    xf = _flatten_channels_first(xp.astype(dtype, copy=False))
    w = w.astype(dtype, copy=False)
    total = xf.shape[1]
    off_max = (kd - 1) * hp * wp + (kh - 1) * wp + (kw - 1)
    length = total - off_max
    out = np.zeros((o, total), dtype=dtype)
    acc = out[:, :length]
    if c > 2 * o:
        # few outputs: multiply every tap at once, then add shifted row blocks
        for group in _tap_groups((kd, kh, kw), o, total):
            wstack = np.concatenate([w[:, :, a, b, cc] for a, b, cc in group], axis=0)
            prod = wstack @ xf
            for i, (a, b, cc) in enumerate(group):
                off = a * hp * wp + b * wp + cc
                acc += prod[i * o:(i + 1) * o, off:off + length]
            del prod
    else:
        # in-plane taps as columns, depth taps as stacked output rows
        cols, _ = _inplane_columns(xf, kh, kw, wp)
        wm = w.transpose(2, 0, 3, 4, 1).reshape(kd * o, kh * kw * c)
        prod = wm @ cols
        for a in range(kd):
            off = a * hp * wp
            acc += prod[a * o:(a + 1) * o, off:off + length]
        del prod, cols
    out = out.reshape(o, n, dp, hp, wp)[:, :, :do, :ho, :wo]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))


def _pad(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    pd, ph, pw = padding
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def conv3d_forward(x: np.ndarray, w: np.ndarray, stride, padding) -> np.ndarray:
    y = correlate_s1(_pad(x, padding), w)
    sd, sh, sw = stride
    if (sd, sh, sw) != (1, 1, 1):
        y = np.ascontiguousarray(y[:, :, ::sd, ::sh, ::sw])
    return y


def _dilate_to_s1_grid(g: np.ndarray, s1_shape, stride) -> np.ndarray:
    sd, sh, sw = stride
    if (sd, sh, sw) == (1, 1, 1) and g.shape[2:] == tuple(s1_shape):
        return g
    full = np.zeros(g.shape[:2] + tuple(s1_shape), dtype=g.dtype)
    do, ho, wo = g.shape[2:]
    full[:, :, : (do - 1) * sd + 1 : sd, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw] = g
    return full


def conv3d_grad_input(g: np.ndarray, w: np.ndarray, in_spatial, stride, padding) -> np.ndarray:
    """Adjoint of :func:`conv3d_forward` with respect to the input."""
    kd, kh, kw = w.shape[2:]
    pd, ph, pw = padding
    s1 = (in_spatial[0] + 2 * pd - kd + 1, in_spatial[1] + 2 * ph - kh + 1, in_spatial[2] + 2 * pw - kw + 1)
    g1 = _dilate_to_s1_grid(g, s1, stride)
    g1 = np.pad(g1, ((0, 0), (0, 0), (kd - 1, kd - 1), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    gxp = correlate_s1(g1, wt)
    d, h, ww = in_spatial
    return np.ascontiguousarray(gxp[:, :, pd:pd + d, ph:ph + h, pw:pw + ww])


def conv3d_grad_weight(x: np.ndarray, g: np.ndarray, kernel, stride, padding) -> np.ndarray:
    """Gradient of :func:`conv3d_forward` with respect to the kernel."""
    kh, kw = kernel[1:]
    per_sample = kh * kw * x.shape[1] * int(np.prod([n + 2 * p for n, p in zip(x.shape[2:], padding)]))
    chunks = _sample_chunks(x.shape[0], per_sample)
    if len(chunks) > 1:
        return sum(_grad_weight(x[sl], g[sl], kernel, stride, padding) for sl in chunks)
    return _grad_weight(x, g, kernel, stride, padding)


def _grad_weight(x: np.ndarray, g: np.ndarray, kernel, stride, padding) -> np.ndarray:
    kd, kh, kw = kernel
    xp = _pad(x, padding)
    n, c, dp, hp, wp = xp.shape
    s1 = (dp - kd + 1, hp - kh + 1, wp - kw + 1)
    g1 = _dilate_to_s1_grid(g, s1, stride)
    dtype = np.result_type(x.dtype, g.dtype)
    o = g1.shape[1]
    # embed g into the padded grid so flat offsets line up with xp
    gfull = np.zeros((o, n, dp, hp, wp), dtype=dtype)
    gfull[:, :, : s1[0], : s1[1], : s1[2]] = g1.transpose(1, 0, 2, 3, 4)
    gf = gfull.reshape(o, -1)
    xf = _flatten_channels_first(xp.astype(dtype, copy=False))
    off_max = (kd - 1) * hp * wp + (kh - 1) * wp + (kw - 1)
    length = xf.shape[1] - off_max
    gs = gf[:, :length]
    cols, _ = _inplane_columns(xf, kh, kw, wp)
    gw = np.empty((o, kd, kh, kw, c), dtype=dtype)
    for a in range(kd):
        off = a * hp * wp
        gw[:, a] = (gs @ cols[:, off:off + length].T).reshape(o, kh, kw, c)
    return np.ascontiguousarray(gw.transpose(0, 4, 1, 2, 3))


def tconv_natural_extent(n: int, k: int, s: int, p: int) -> int:
    return (n - 1) * s + k - 2 * p


def fit_extent(y: np.ndarray, target, axis_offset: int = 2) -> np.ndarray:
    """Center-crop or zero-pad spatial axes of ``y`` to ``target``.

    An odd difference puts the extra voxel at the end, which keeps the
    operation the exact adjoint of a conv that ignores its trailing row.
    """
    pads, slices = [], []
    for ax, t in enumerate(target):
        n = y.shape[axis_offset + ax]
        diff = t - n
        if diff >= 0:
            pads.append((diff // 2, diff - diff // 2))
            slices.append(slice(None))
        else:
            lo = (-diff) // 2
            pads.append((0, 0))
            slices.append(slice(lo, lo + t))
    y = y[(slice(None),) * axis_offset + tuple(slices)]
    if any(p for pair in pads for p in pair):
        y = np.pad(y, ((0, 0),) * axis_offset + tuple(pads))
    return np.ascontiguousarray(y)


def unfit_extent(g: np.ndarray, natural, axis_offset: int = 2) -> np.ndarray:
    """Adjoint of :func:`fit_extent`: map a gradient back to the natural extent."""
    pads, slices = [], []
    for ax, n in enumerate(natural):
        t = g.shape[axis_offset + ax]
        diff = t - n
        if diff >= 0:
            lo = diff // 2
            slices.append(slice(lo, lo + n))
            pads.append((0, 0))
        else:
            lo = (-diff) // 2
            slices.append(slice(None))
            pads.append((lo, -diff - lo))
    g = g[(slice(None),) * axis_offset + tuple(slices)]
    if any(p for pair in pads for p in pair):
        g = np.pad(g, ((0, 0),) * axis_offset + tuple(pads))
    return np.ascontiguousarray(g)
