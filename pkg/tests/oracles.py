"""Slow, obviously-correct reference implementations used only by tests."""

from __future__ import annotations

import math

import numpy as np


def naive_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Direct nested-loop cross-correlation with zero 'same' padding, in float64."""
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    pad = (k - 1) // 2
    xp = np.zeros((n, c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    out = np.zeros((n, c_out, h, wd))
    for o in range(c_out):
        for i in range(h):
            for j in range(wd):
                out[:, o, i, j] = (xp[:, :, i : i + k, j : j + k] * w[o]).sum(axis=(1, 2, 3)) + b[o]
    return out


def naive_pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.zeros((n, c // (r * r), h * r, w * r), dtype=x.dtype)
    for ch in range(c):
        oc, rem = divmod(ch, r * r)
        a, b = divmod(rem, r)
        out[:, oc, a::r, b::r] = x[:, ch]
    return out


def _round_half_even(v: float) -> int:
    return round(v)  # Python's round is half-to-even


def bigint_integer_infer(g, x_codes: np.ndarray) -> np.ndarray:
    """Integer engine on Python ints: exact accumulation, same float64
    requantization multipliers as the deployed engine."""
    from quantsr.graph import OP_ADD, OP_CONV, OP_INPUT, OP_SHUFFLE

    vals = []
    cur = [[[[int(v) for v in row] for row in ch] for ch in img] for img in x_codes]
    cur_qp = g.layers[0].qparams
    for layer in g.layers:
        if layer.op == OP_INPUT:
            pass
        elif layer.op == OP_CONV:
            c_out, c_in, k, _ = layer.shape
            pad = k // 2
            zp_in = cur_qp.zero_point
            s_in = float(np.float64(cur_qp.scale[0]))
            s_out = float(np.float64(layer.qparams.scale[0]))
            w = layer.weight.astype(int).tolist()
            bias = layer.bias.astype(int).tolist()
            mult = [s_in * float(np.float64(s)) / s_out for s in layer.weight_qparams.scale]
            lo = layer.qparams.zero_point if layer.relu else layer.qparams.qmin
            n_img, h, wd = len(cur), len(cur[0][0]), len(cur[0][0][0])
            out = []
            for img in cur:
                planes = []
                for o in range(c_out):
                    plane = []
                    for i in range(h):
                        row = []
                        for j in range(wd):
                            acc = bias[o]
                            for ci in range(c_in):
                                for dy in range(k):
                                    y = i + dy - pad
                                    if not 0 <= y < h:
                                        continue
                                    for dx in range(k):
                                        xx = j + dx - pad
                                        if 0 <= xx < wd:
                                            acc += w[o][ci][dy][dx] * (img[ci][y][xx] - zp_in)
                            q = _round_half_even(acc * mult[o]) + layer.qparams.zero_point
                            row.append(min(max(q, lo), layer.qparams.qmax))
                        plane.append(row)
                    planes.append(plane)
                out.append(planes)
            cur = out
        elif layer.op == OP_ADD:
            a, b = layer.shape[:2]
            qa, qb, qo = g.layers[a].qparams, g.layers[b].qparams, layer.qparams
            ra = float(np.float64(qa.scale[0])) / float(np.float64(qo.scale[0]))
            rb = float(np.float64(qb.scale[0])) / float(np.float64(qo.scale[0]))
            va, vb = vals[a], vals[b]
            cur = [
                [
                    [
                        [
                            min(
                                max(
                                    _round_half_even((pa - qa.zero_point) * ra)
                                    + _round_half_even((pb - qb.zero_point) * rb)
                                    + qo.zero_point,
                                    qo.qmin,
                                ),
                                qo.qmax,
                            )
                            for pa, pb in zip(ra_row, rb_row)
                        ]
                        for ra_row, rb_row in zip(ca, cb)
                    ]
                    for ca, cb in zip(ia, ib)
                ]
                for ia, ib in zip(va, vb)
            ]
        elif layer.op == OP_SHUFFLE:
            cur = naive_pixel_shuffle(np.array(cur, dtype=np.int64), layer.shape[0]).tolist()
        cur_qp = layer.qparams
        vals.append(cur)
    return np.array(cur, dtype=np.int64)


def ssim_constant(a: float, b: float, c1: float = 1e-4) -> float:
    """SSIM of two constant images: the structure term is C2/C2 = 1."""
    return (2 * a * b + c1) / (a * a + b * b + c1)


def cubic(t: float, a: float = -0.5) -> float:
    t = abs(t)
    if t <= 1:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def psnr_closed_form(mse: float) -> float:
    return 10 * math.log10(1.0 / mse)
